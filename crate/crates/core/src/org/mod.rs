//! Dynamic team formation from per-agent connection decisions.

mod graph;
mod learner;

pub use graph::{
    build_team_graph, decode_org_action, encode_org_action, find_teams, nearest_neighbors,
    structural_reward, total_org_reward, AgentGraph, TeamPartition, TeamTrace,
};
pub use learner::{org_observation, org_td_loss, OrgLearner, OrgLearnerConfig, OrgTransition, NEIGHBOR_FEATURES};
