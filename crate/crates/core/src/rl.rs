//! Value-learning helpers shared by the organization and decision learners.

use rand::Rng;

use crate::error::{Error, Result};

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(q: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, &v) in q.iter().enumerate() {
        if best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best
}

/// Epsilon-greedy choice over one Q vector.
pub fn select_action<R: Rng>(q: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::usage("cannot select from an empty Q vector"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::usage(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..q.len()));
    }
    Ok(argmax(q).expect("nonempty"))
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::config(format!("discount {gamma} outside [0, 1]")))
    }
}

/// One-step bootstrapped target; terminal transitions do not bootstrap.
pub fn td_target(reward: f64, gamma: f64, next_value: f64, done: bool) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_value
    }
}
