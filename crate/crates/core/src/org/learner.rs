use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::AgentGraph;
use crate::autodiff::{stack_rows, Activation, Adam, AdamConfig, ParamStore, QNet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rl::{argmax, select_action, td_target, validate_gamma};

/// Width of the per-neighbor block appended to the environment observation.
pub const NEIGHBOR_FEATURES: usize = 4;

/// Environment observation followed, per neighbor rank, by the relative
/// offset, whether the pair was connected at the previous step and whether
/// the rank is filled.
pub fn org_observation(
    env_obs: &[f64],
    i: usize,
    positions: &[(f64, f64)],
    neighbors: &[usize],
    previous: Option<&AgentGraph>,
    m: usize,
) -> Vec<f64> {
    let mut o = Vec::with_capacity(env_obs.len() + NEIGHBOR_FEATURES * m);
    o.extend_from_slice(env_obs);
    for r in 0..m {
        match neighbors.get(r) {
            Some(&j) => {
                let linked = previous.is_some_and(|g| g.has_edge(i, j));
                o.extend_from_slice(&[
                    positions[j].0 - positions[i].0,
                    positions[j].1 - positions[i].1,
                    f64::from(u8::from(linked)),
                    1.0,
                ]);
            }
            None => o.extend_from_slice(&[0.0; NEIGHBOR_FEATURES]),
        }
    }
    o
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrgTransition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrgLearnerConfig {
    pub m: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub double_q: bool,
    pub dueling: bool,
}

/// Shared-parameter DQN over organization actions `0..2^m`.
#[derive(Clone, Debug)]
pub struct OrgLearner {
    pub config: OrgLearnerConfig,
    pub net: QNet,
    pub online: ParamStore,
    pub target: ParamStore,
    pub adam: Adam,
}

impl OrgLearner {
    pub fn new<R: Rng>(obs_width: usize, config: OrgLearnerConfig, rng: &mut R) -> Result<Self> {
        validate_gamma(config.gamma)?;
        if config.m == 0 || config.m > 8 {
            return Err(Error::config(format!("neighbor count {} outside 1..=8", config.m)));
        }
        let mut online = ParamStore::new();
        let net = QNet::new(
            &mut online,
            "org",
            obs_width + NEIGHBOR_FEATURES * config.m,
            &config.hidden,
            1 << config.m,
            Activation::Relu,
            config.dueling,
            rng,
        )?;
        let target = online.clone();
        let adam = Adam::new(
            &online,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            config,
            net,
            online,
            target,
            adam,
        })
    }

    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    pub fn q_values(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        self.net.eval(&self.online, stack_rows(rows, self.input_width()))
    }

    pub fn act<R: Rng>(&self, rows: &[Vec<f64>], epsilon: f64, rng: &mut R) -> Result<Vec<usize>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.q_values(rows)?;
        q.rows()
            .into_iter()
            .map(|r| select_action(r.as_slice().expect("standard layout"), epsilon, rng))
            .collect()
    }

    /// TD targets from the target network; double Q picks the next action
    /// with the online network.
    pub fn targets(&self, batch: &[OrgTransition]) -> Result<Vec<f64>> {
        let next: Vec<&[f64]> = batch.iter().map(|t| t.next_obs.as_slice()).collect();
        let x = stack_rows(&next, self.input_width());
        let q_target = self.net.eval(&self.target, x.clone())?;
        let q_online = if self.config.double_q {
            Some(self.net.eval(&self.online, x)?)
        } else {
            None
        };
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let row = q_target.row(b);
                let next_value = match &q_online {
                    Some(q) => row[argmax(q.row(b).as_slice().expect("layout")).expect("actions")],
                    None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                td_target(t.reward, self.config.gamma, next_value, t.done)
            })
            .collect())
    }

    /// Mean squared TD error of the online network against fixed targets.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[OrgTransition],
        targets: &[f64],
    ) -> Result<Var> {
        org_td_loss(&self.net, tape, store, batch, targets)
    }

    /// One optimizer step; returns the loss before the step.
    pub fn update(&mut self, batch: &[OrgTransition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::usage("organization update on an empty batch"));
        }
        let targets = self.targets(batch)?;
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, &self.online, batch, &targets)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::numeric("organization control", format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        self.online.accumulate(&grads);
        self.adam.step(&mut self.online)?;
        Ok(value)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online)
    }
}

pub fn org_td_loss(
    net: &QNet,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &[OrgTransition],
    targets: &[f64],
) -> Result<Var> {
    let rows: Vec<&[f64]> = batch.iter().map(|t| t.obs.as_slice()).collect();
    let x = tape.constant(stack_rows(&rows, net.input_width()));
    let q = net.forward(tape, store, x)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let chosen = tape.pick_cols(q, &actions)?;
    let y = tape.constant(Tensor::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column"));
    let diff = tape.sub(chosen, y)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}
