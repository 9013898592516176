//! Multi-agent gridworld with four cooperative scenarios.

mod spec;
mod trace;
mod world;

pub use spec::{reward_for_event, EnvSpec, Event, RewardTable, Scenario};
pub use trace::StepTrace;
pub use world::{Action, Entity, EnvState, EventRecord, GridEnv, Pos, Side, StepOutcome};
