pub mod autodiff;
pub mod config;
pub mod env;
pub mod decision;
pub mod error;
pub mod intention;
pub mod org;
pub mod output;
pub mod rl;
pub mod trainer;

pub use error::{Error, Result};
