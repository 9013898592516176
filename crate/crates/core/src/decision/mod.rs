//! Local action values, monotonic team mixing and the combined TD objective.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, Activation, Adam, AdamConfig, Mlp, MlpSpec, ParamStore, QNet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::intention::TeamLayout;
use crate::org::TeamPartition;
pub use crate::rl::select_action;
use crate::rl::{argmax, td_target, validate_gamma};

/// `sum_{j != k} |c_k - c_j|^2`.
pub fn team_intrinsic_reward(intentions: &[Vec<f64>], k: usize) -> f64 {
    intentions
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, c)| c.iter().zip(&intentions[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub input_width: usize,
    /// Columns of the local input handed to the mixer as member features.
    pub feature_cols: Range<usize>,
    pub state_width: usize,
    pub hidden: Vec<usize>,
    pub mixer_hidden: usize,
    pub actions: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub lambda_qmix: f64,
    pub double_q: bool,
    pub dueling: bool,
    /// Train the team mixing term at all.
    pub mixing: bool,
}

impl DecisionConfig {
    pub fn feature_width(&self) -> usize {
        self.feature_cols.len()
    }
}

/// Shared local Q head plus hypernetworks producing per-member mixing
/// weights (made nonnegative by `abs`) and a state bias.
#[derive(Clone, Debug)]
pub struct DecisionNet {
    pub local: QNet,
    pub hyper_w: Mlp,
    pub hyper_b: Mlp,
}

impl DecisionNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &DecisionConfig, rng: &mut R) -> Result<Self> {
        let local = QNet::new(
            store,
            "local",
            cfg.input_width,
            &cfg.hidden,
            cfg.actions,
            Activation::Relu,
            cfg.dueling,
            rng,
        )?;
        let hyper_w = Mlp::new(
            store,
            "mix.w",
            MlpSpec::new(vec![cfg.state_width + cfg.feature_width(), cfg.mixer_hidden, 1], Activation::Relu),
            rng,
        )?;
        let hyper_b = Mlp::new(
            store,
            "mix.b",
            MlpSpec::new(vec![cfg.state_width, cfg.mixer_hidden, 1], Activation::Relu),
            rng,
        )?;
        Ok(Self { local, hyper_w, hyper_b })
    }

    pub fn local_q_values(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Var> {
        self.local.forward(tape, store, inputs)
    }

    /// `Q_tot^k = sum_{i in k} |w(s, f_i)| Q_i + b(s)`, one row per team.
    /// `q` and `features` have one row per layout row, `states` one per step.
    pub fn mix_team_q(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        features: Var,
        states: Var,
        layout: &TeamLayout,
    ) -> Result<Var> {
        let steps: Vec<usize> = layout.rows.iter().map(|r| r.0).collect();
        let s_rows = tape.gather_rows(states, &steps)?;
        let x = tape.concat_cols(&[s_rows, features])?;
        let raw = self.hyper_w.forward(tape, store, x)?;
        let w = tape.abs(raw);
        let wq = tape.mul(w, q)?;
        let summed = tape.segment_sum(wq, &layout.team_of_row, layout.n_teams())?;
        let s_teams = tape.gather_rows(states, &layout.team_step)?;
        let b = self.hyper_b.forward(tape, store, s_teams)?;
        tape.add(summed, b)
    }
}

/// One environment step as seen by the decision learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionStep {
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub alive: Vec<bool>,
    pub teams: TeamPartition,
    pub team_rewards: Vec<f64>,
    pub state: Vec<f64>,
    pub next_inputs: Vec<Vec<f64>>,
    pub next_alive: Vec<bool>,
    pub next_teams: TeamPartition,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl DecisionStep {
    pub fn n_agents(&self) -> usize {
        self.inputs.len()
    }

    /// Number of living agents, i.e. agent samples this step contributes.
    pub fn samples(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }
}

/// Constant inputs and targets of one decision update.
#[derive(Clone, Debug)]
pub struct DecisionBatch {
    pub layout: TeamLayout,
    pub inputs: Tensor,
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub local_targets: Vec<f64>,
    /// `(team, target)` for every team that keeps its members.
    pub team_targets: Vec<(usize, f64)>,
    pub skipped_teams: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecisionLossParts {
    pub total: Var,
    pub local: Var,
    pub team: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DecisionLearner {
    pub config: DecisionConfig,
    pub net: DecisionNet,
    pub online: ParamStore,
    pub target: ParamStore,
    pub adam: Adam,
}

impl DecisionLearner {
    pub fn new<R: Rng>(config: DecisionConfig, rng: &mut R) -> Result<Self> {
        validate_gamma(config.gamma)?;
        if config.feature_cols.end > config.input_width {
            return Err(Error::config("mixer feature columns exceed the local input"));
        }
        let mut online = ParamStore::new();
        let net = DecisionNet::new(&mut online, &config, rng)?;
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

    pub fn q_values(&self, inputs: &[Vec<f64>]) -> Result<Tensor> {
        self.net
            .local
            .eval(&self.online, stack_rows(inputs, self.config.input_width))
    }

    pub fn act<R: Rng>(&self, inputs: &[Vec<f64>], alive: &[bool], epsilon: f64, rng: &mut R) -> Result<Vec<usize>> {
        let q = self.q_values(inputs)?;
        (0..inputs.len())
            .map(|i| {
                if alive[i] {
                    select_action(q.row(i).as_slice().expect("layout"), epsilon, rng)
                } else {
                    Ok(0)
                }
            })
            .collect()
    }

    fn feature_tensor(&self, inputs: &Tensor) -> Tensor {
        inputs
            .slice(ndarray::s![.., self.config.feature_cols.clone()])
            .to_owned()
    }

    /// Builds the constant part of an update: stacked inputs and TD targets.
    pub fn prepare(&self, steps: &[&DecisionStep]) -> Result<DecisionBatch> {
        let partitions: Vec<&TeamPartition> = steps.iter().map(|s| &s.teams).collect();
        let layout = TeamLayout::new(&partitions)?;
        let w = self.config.input_width;
        let rows: Vec<&[f64]> = layout.rows.iter().map(|&(s, i)| steps[s].inputs[i].as_slice()).collect();
        let next_rows: Vec<&[f64]> = layout
            .rows
            .iter()
            .map(|&(s, i)| steps[s].next_inputs[i].as_slice())
            .collect();
        let inputs = stack_rows(&rows, w);
        let next_inputs = stack_rows(&next_rows, w);
        let states = stack_rows(&steps.iter().map(|s| s.state.as_slice()).collect::<Vec<_>>(), self.config.state_width);
        let next_states = stack_rows(
            &steps.iter().map(|s| s.next_state.as_slice()).collect::<Vec<_>>(),
            self.config.state_width,
        );
        let actions: Vec<usize> = layout.rows.iter().map(|&(s, i)| steps[s].actions[i]).collect();

        let q_next_target = self.net.local.eval(&self.target, next_inputs.clone())?;
        let q_next_online = self.net.local.eval(&self.online, next_inputs.clone())?;
        let mut greedy = Vec::with_capacity(layout.n_rows());
        let mut next_value = Vec::with_capacity(layout.n_rows());
        for r in 0..layout.n_rows() {
            let chooser = if self.config.double_q { &q_next_online } else { &q_next_target };
            let a = argmax(chooser.row(r).as_slice().expect("layout")).expect("actions");
            greedy.push(a);
            next_value.push(q_next_target[[r, a]]);
        }
        let local_targets: Vec<f64> = layout
            .rows
            .iter()
            .enumerate()
            .map(|(r, &(s, i))| {
                let st = steps[s];
                let terminal = st.done || !st.next_alive[i];
                td_target(st.rewards[i], self.config.gamma, next_value[r], terminal)
            })
            .collect();

        let mut team_targets = Vec::new();
        let mut skipped = 0;
        if self.config.mixing {
            // target mixer over next-step greedy member values, same grouping
            let mut tape = Tape::new();
            let q_greedy: Vec<f64> = (0..layout.n_rows()).map(|r| q_next_target[[r, greedy[r]]]).collect();
            let qv = tape.constant(Tensor::from_shape_vec((q_greedy.len(), 1), q_greedy).expect("column"));
            let fv = tape.constant(self.feature_tensor(&next_inputs));
            let sv = tape.constant(next_states);
            let q_tot_next = self.net.mix_team_q(&mut tape, &self.target, qv, fv, sv, &layout)?;
            let q_tot_next = tape.value(q_tot_next).clone();
            for k in 0..layout.n_teams() {
                let s = layout.team_step[k];
                let st = steps[s];
                let local = k - layout.step_offset[s];
                let reward = st.team_rewards[local];
                if st.done {
                    team_targets.push((k, reward));
                    continue;
                }
                let members = &st.teams.teams[local];
                if st.next_teams.teams.iter().any(|t| t == members) {
                    team_targets.push((k, td_target(reward, self.config.gamma, q_tot_next[[k, 0]], false)));
                } else {
                    skipped += 1;
                }
            }
        }
        Ok(DecisionBatch {
            layout,
            inputs,
            states,
            actions,
            local_targets,
            team_targets,
            skipped_teams: skipped,
        })
    }

    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &DecisionBatch) -> Result<DecisionLossParts> {
        decision_losses(&self.net, &self.config, tape, store, batch)
    }

    /// One optimizer step on the combined loss; returns its value before the step.
    pub fn update(&mut self, batch: &DecisionBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let parts = self.loss(&mut tape, &self.online, batch)?;
        let value = tape.scalar(parts.total);
        if !value.is_finite() {
            return Err(Error::numeric("decision", format!("loss is {value}")));
        }
        let grads = tape.backward(parts.total)?;
        self.online.accumulate(&grads);
        self.adam.step(&mut self.online)?;
        Ok(value)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online)
    }
}

/// Mean local squared TD error plus `lambda_qmix` times the mean team
/// squared TD error over teams with a valid target.
pub fn decision_losses(
    net: &DecisionNet,
    cfg: &DecisionConfig,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &DecisionBatch,
) -> Result<DecisionLossParts> {
    let x = tape.constant(batch.inputs.clone());
    decision_losses_from(net, cfg, tape, store, batch, x)
}

/// As [`decision_losses`] with the local inputs supplied as a recorded
/// node, so upstream encoders receive the TD gradient. `x` must hold the
/// values of `batch.inputs`; mixer features stay constant.
pub fn decision_losses_from(
    net: &DecisionNet,
    cfg: &DecisionConfig,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &DecisionBatch,
    x: Var,
) -> Result<DecisionLossParts> {
    let q = net.local_q_values(tape, store, x)?;
    let chosen = tape.pick_cols(q, &batch.actions)?;
    let y = tape.constant(Tensor::from_shape_vec((batch.local_targets.len(), 1), batch.local_targets.clone()).expect("column"));
    let d = tape.sub(chosen, y)?;
    let sq = huber(tape, d)?;
    let local = tape.mean(sq);
    if !cfg.mixing || cfg.lambda_qmix == 0.0 || batch.team_targets.is_empty() {
        return Ok(DecisionLossParts {
            total: local,
            local,
            team: None,
        });
    }
    let features = tape.constant(batch.inputs.slice(ndarray::s![.., cfg.feature_cols.clone()]).to_owned());
    let states = tape.constant(batch.states.clone());
    // team term sees the inputs as constants; only the local term shapes x
    let team_chosen = if tape.is_constant(x) {
        chosen
    } else {
        let xc = tape.constant(batch.inputs.clone());
        let qc = net.local_q_values(tape, store, xc)?;
        tape.pick_cols(qc, &batch.actions)?
    };
    let q_tot = net.mix_team_q(tape, store, team_chosen, features, states, &batch.layout)?;
    let idx: Vec<usize> = batch.team_targets.iter().map(|t| t.0).collect();
    let picked = tape.gather_rows(q_tot, &idx)?;
    let yt: Vec<f64> = batch.team_targets.iter().map(|t| t.1).collect();
    let yt = tape.constant(Tensor::from_shape_vec((yt.len(), 1), yt).expect("column"));
    let dt = tape.sub(picked, yt)?;
    let sqt = huber(tape, dt)?;
    let team = tape.mean(sqt);
    let weighted = tape.scale(team, cfg.lambda_qmix);
    let total = tape.add(local, weighted)?;
    Ok(DecisionLossParts {
        total,
        local,
        team: Some(team),
    })
}

/// Elementwise Huber penalty with unit threshold, written as
/// `c (d - c/2)` with `c = clamp(d, -1, 1)`.
fn huber(tape: &mut Tape, d: Var) -> Result<Var> {
    let c = tape.clamp(d, -1.0, 1.0);
    let half = tape.scale(c, 0.5);
    let rest = tape.sub(d, half)?;
    tape.mul(c, rest)
}
