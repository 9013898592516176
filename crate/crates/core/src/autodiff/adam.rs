use serde::{Deserialize, Serialize};

use super::params::{ParamStore, TensorRecord};
use super::tape::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<TensorRecord>,
    pub second: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).raw_dim()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Any non-finite gradient aborts before a single value is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::usage("optimizer built for a different store"));
        }
        for id in store.ids() {
            if let Some(bad) = store.grad(id).iter().find(|g| !g.is_finite()) {
                return Err(Error::numeric(
                    "optimizer",
                    format!("gradient of {} contains {bad}", store.name(id)),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = store.grad(id).clone();
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / c1;
                let vh = v / c2;
                *p -= learning_rate * mh / (vh.sqrt() + epsilon);
            });
        }
        store.zero_grads();
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        let rec = |ts: &[Tensor]| {
            ts.iter()
                .enumerate()
                .map(|(i, t)| TensorRecord {
                    name: i.to_string(),
                    shape: [t.nrows(), t.ncols()],
                    values: t.iter().copied().collect(),
                })
                .collect()
        };
        AdamState {
            config: self.config,
            step: self.step,
            first: rec(&self.first),
            second: rec(&self.second),
        }
    }

    pub fn restore(store: &ParamStore, state: &AdamState) -> Result<Self> {
        let mut adam = Adam::new(store, state.config);
        if state.first.len() != adam.first.len() || state.second.len() != adam.second.len() {
            return Err(Error::Format("optimizer state layout mismatch".into()));
        }
        let load = |dst: &mut Vec<Tensor>, src: &[TensorRecord]| -> Result<()> {
            for (d, r) in dst.iter_mut().zip(src) {
                if r.shape != [d.nrows(), d.ncols()] {
                    return Err(Error::Format("optimizer moment shape mismatch".into()));
                }
                *d = Tensor::from_shape_vec((r.shape[0], r.shape[1]), r.values.clone())
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            Ok(())
        };
        load(&mut adam.first, &state.first)?;
        load(&mut adam.second, &state.second)?;
        adam.step = state.step;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, -2.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(w), &array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.0]]);
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let grads = tape.backward(v).unwrap();
        store.accumulate(&grads);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
        );
        adam.step(&mut store).unwrap();
        // m_hat = 1, v_hat = 1: step = -0.1 / (1 + 1e-8)
        assert!((store.value(w)[[0, 0]] + 0.1).abs() < 1e-8);
        assert_eq!(store.grad(w)[[0, 0]], 0.0);
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut store = ParamStore::new();
        let w = store.add("decoder.l0.w", array![[1.0]]);
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let s = tape.scale(v, f64::NAN);
        let grads = tape.backward(s).unwrap();
        store.accumulate(&grads);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("decoder.l0.w"), "{err}");
        assert_eq!(store.value(w)[[0, 0]], 1.0);
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[3.0, -2.0, 1.5]]);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
        );
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let v = tape.param(&store, w);
            let sq = tape.square(v);
            let loss = tape.sum(sq);
            losses.push(tape.scalar(loss));
            let g = tape.backward(loss).unwrap();
            store.accumulate(&g);
            adam.step(&mut store).unwrap();
        }
        for pair in losses[5..].windows(2) {
            assert!(pair[1] < pair[0], "{pair:?}");
        }
    }
}
