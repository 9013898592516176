use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};

/// What the local Q-network reads for each agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionInput {
    /// Individual intention followed by individual cognition.
    IntentionCognition,
    /// Team intention followed by individual cognition.
    TeamCognition,
    /// The raw environment observation.
    Observation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeamReward {
    /// Squared intention distance to every other team.
    Intrinsic,
    /// Sum of member external rewards.
    SumExternal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Teaming {
    /// Learned connection decisions.
    Learned,
    /// A random partition drawn at reset and kept for the episode.
    RandomFixed,
    /// Every agent alone.
    Singletons,
}

/// Pathways a variant enables; derived from the configured variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantPlan {
    pub teaming: Teaming,
    pub structural_reward: bool,
    pub intentions: bool,
    pub consensus: bool,
    pub decision_input: DecisionInput,
    pub team_reward: TeamReward,
    pub mixing: bool,
}

impl VariantPlan {
    pub fn of(config: &ExperimentConfig) -> Self {
        let full = VariantPlan {
            teaming: Teaming::Learned,
            structural_reward: config.algo.alpha_u != 0.0,
            intentions: true,
            consensus: true,
            decision_input: DecisionInput::IntentionCognition,
            team_reward: TeamReward::Intrinsic,
            mixing: true,
        };
        match config.run.variant {
            Variant::Full | Variant::K1 | Variant::K2 | Variant::K3 => full,
            Variant::C => VariantPlan {
                structural_reward: false,
                ..full
            },
            Variant::G => VariantPlan {
                consensus: false,
                decision_input: DecisionInput::TeamCognition,
                ..full
            },
            Variant::I => VariantPlan {
                team_reward: TeamReward::SumExternal,
                ..full
            },
            Variant::Idqn => VariantPlan {
                teaming: Teaming::Singletons,
                structural_reward: false,
                intentions: false,
                consensus: false,
                decision_input: DecisionInput::Observation,
                team_reward: TeamReward::SumExternal,
                mixing: false,
            },
            Variant::QmixRandom => VariantPlan {
                teaming: Teaming::RandomFixed,
                structural_reward: false,
                intentions: false,
                consensus: false,
                decision_input: DecisionInput::Observation,
                team_reward: TeamReward::SumExternal,
                mixing: true,
            },
        }
    }
}

/// `base` with the settings a variant implies.
pub fn ablation_config(base: &ExperimentConfig, variant: Variant) -> ExperimentConfig {
    let mut c = base.clone();
    c.run.variant = variant;
    match variant {
        Variant::C => c.algo.alpha_u = 0.0,
        Variant::K1 => c.algo.m = 1,
        Variant::K2 => c.algo.m = 2,
        Variant::K3 => c.algo.m = 3,
        _ => {}
    }
    c
}
