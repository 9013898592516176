use serde::{Deserialize, Serialize};

/// One line of the metrics stream. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    /// Sum over steps and agents of external rewards.
    pub total_reward: f64,
    /// Mean over steps of the number of teams.
    pub avg_team_number: f64,
    pub steps: usize,
    pub epsilon: f64,
    /// Mean loss of each module over the training ticks of the episode;
    /// `None` when the module was not trained.
    pub org_loss: Option<f64>,
    pub team_intention_loss: Option<f64>,
    pub consensus_loss: Option<f64>,
    pub decision_loss: Option<f64>,
    pub train_ticks: usize,
    pub team_td_skips: usize,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    /// The record with its timing removed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// What an episode leaves behind for metric computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    /// External reward of every agent at every step.
    pub rewards: Vec<Vec<f64>>,
    pub team_counts: Vec<usize>,
}

/// Running mean that stays `None` until fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMean {
    sum: f64,
    count: usize,
}

impl LossMean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

pub fn total_reward(trace: &EpisodeTrace) -> f64 {
    trace.rewards.iter().flatten().sum()
}

pub fn avg_team_number(trace: &EpisodeTrace) -> f64 {
    if trace.team_counts.is_empty() {
        return 0.0;
    }
    trace.team_counts.iter().sum::<usize>() as f64 / trace.team_counts.len() as f64
}
