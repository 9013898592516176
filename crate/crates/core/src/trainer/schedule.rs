use crate::error::{Error, Result};

/// Piecewise-linear exploration rate, constant after the last breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    episodes: Vec<usize>,
    values: Vec<f64>,
}

impl EpsilonSchedule {
    pub fn new(episodes: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if episodes.is_empty() || episodes.len() != values.len() {
            return Err(Error::config("epsilon schedule needs one value per breakpoint"));
        }
        if episodes[0] != 0 || episodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("epsilon breakpoints must start at 0 and strictly increase"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("epsilon values must lie in [0, 1]"));
        }
        Ok(Self { episodes, values })
    }

    pub fn at(&self, episode: usize) -> f64 {
        let k = self.episodes.partition_point(|&e| e <= episode);
        if k == self.episodes.len() {
            return *self.values.last().expect("nonempty");
        }
        let (e0, e1) = (self.episodes[k - 1], self.episodes[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        if episode == e0 {
            return v0;
        }
        v0 + (v1 - v0) * (episode - e0) as f64 / (e1 - e0) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default() -> EpsilonSchedule {
        EpsilonSchedule::new(vec![0, 200, 400], vec![1.0, 0.2, 0.05]).unwrap()
    }

    #[test]
    fn breakpoints_exact() {
        let s = default();
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(200), 0.2);
        assert_eq!(s.at(400), 0.05);
        assert_eq!(s.at(10_000), 0.05);
    }

    #[test]
    fn midpoint_interpolates() {
        assert!((default().at(100) - 0.6).abs() < 1e-15);
        assert!((default().at(300) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn malformed_schedules() {
        assert!(EpsilonSchedule::new(vec![], vec![]).is_err());
        assert!(EpsilonSchedule::new(vec![5], vec![1.0]).is_err());
        assert!(EpsilonSchedule::new(vec![0, 0], vec![1.0, 0.5]).is_err());
        assert!(EpsilonSchedule::new(vec![0], vec![1.5]).is_err());
    }

    proptest! {
        #[test]
        fn nonincreasing_and_bounded(e in 0usize..1000) {
            let s = default();
            prop_assert!(s.at(e + 1) <= s.at(e));
            prop_assert!((0.05..=1.0).contains(&s.at(e)));
        }
    }
}
