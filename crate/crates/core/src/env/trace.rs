use serde::{Deserialize, Serialize};

use super::world::{EventRecord, GridEnv, Pos, StepOutcome};

/// One line of the episode-trace JSONL export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub agents: Vec<Option<Pos>>,
    pub opponents: Vec<Option<Pos>>,
    pub food: Vec<Pos>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub events: Vec<EventRecord>,
}

impl StepTrace {
    /// Snapshot taken after `outcome` was applied to `env`.
    pub fn capture(env: &GridEnv, actions: &[usize], outcome: &StepOutcome) -> Self {
        let st = env.state();
        let pos = |e: &super::world::Entity| e.alive.then_some(e.pos);
        Self {
            t: st.t,
            agents: st.agents.iter().map(pos).collect(),
            opponents: st.opponents.iter().map(pos).collect(),
            food: st.food.iter().filter(|f| f.alive).map(|f| f.pos).collect(),
            actions: actions.to_vec(),
            rewards: outcome.rewards.clone(),
            events: outcome.events.clone(),
        }
    }
}
