//! Team and individual intention generators.

mod individual;
mod layout;
mod team;

pub use individual::{
    consensus_pairs, consensus_vae_loss, ConsensusLossParts, IndividualConfig, IndividualIntention, IndividualNet,
};
pub use layout::TeamLayout;
pub use team::{
    encode_team_intention, sample_triplets, team_generator_loss, team_spatiotemporal, team_spatiotemporal_labels,
    triplet_contrastive_loss, triplet_value, TeamIntentionConfig, TeamIntentionNet, TeamLossParts,
};
