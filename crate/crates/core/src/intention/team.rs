use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::TeamLayout;
use crate::autodiff::{stack_rows, Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::org::{find_teams, AgentGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamIntentionConfig {
    pub obs_width: usize,
    pub state_width: usize,
    pub hidden: usize,
    pub dim: usize,
    pub margin: f64,
    pub lambda_tg: f64,
    /// Weight of the squared time difference in the team distance.
    pub time_weight: f64,
}

/// Per-member encoder, mean-pooled set encoder, intention head and
/// next-observation decoder.
#[derive(Clone, Debug)]
pub struct TeamIntentionNet {
    pub mu: Mlp,
    pub nu: Mlp,
    pub omega: Mlp,
    pub xi: Mlp,
    pub dim: usize,
}

impl TeamIntentionNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &TeamIntentionConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden;
        let relu = Activation::Relu;
        Ok(Self {
            mu: Mlp::new(store, "team.mu", MlpSpec::new(vec![cfg.obs_width, h], relu).with_output_activation(), rng)?,
            nu: Mlp::new(store, "team.nu", MlpSpec::new(vec![h, h], relu).with_output_activation(), rng)?,
            omega: Mlp::new(store, "team.omega", MlpSpec::new(vec![h + cfg.state_width, h, cfg.dim], relu), rng)?,
            xi: Mlp::new(store, "team.xi", MlpSpec::new(vec![cfg.obs_width + cfg.dim, h, cfg.obs_width], relu), rng)?,
            dim: cfg.dim,
        })
    }

    /// Intentions of every team in `layout` (`teams x dim`). `obs` holds one
    /// row per layout row, `states` one row per step.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        states: Var,
        layout: &TeamLayout,
    ) -> Result<Var> {
        let h = self.mu.forward(tape, store, obs)?;
        let sums = tape.segment_sum(h, &layout.team_of_row, layout.n_teams())?;
        let inv: Vec<f64> = (0..layout.n_teams()).map(|k| 1.0 / layout.team_size(k) as f64).collect();
        let pooled = tape.scale_rows(sums, &inv)?;
        let e = self.nu.forward(tape, store, pooled)?;
        let s = tape.gather_rows(states, &layout.team_step)?;
        let joint = tape.concat_cols(&[e, s])?;
        self.omega.forward(tape, store, joint)
    }

    /// `sum_k (1/n_k) sum_{i in k} |f_xi(o_i, c_k) - o'_i|^2`.
    pub fn prediction_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        next_obs: Var,
        c: Var,
        layout: &TeamLayout,
    ) -> Result<Var> {
        let c_rows = tape.gather_rows(c, &layout.team_of_row)?;
        let x = tape.concat_cols(&[obs, c_rows])?;
        let pred = self.xi.forward(tape, store, x)?;
        let diff = tape.sub(pred, next_obs)?;
        let sq = tape.square(diff);
        let per_row = tape.row_sum(sq);
        let w: Vec<f64> = layout
            .team_of_row
            .iter()
            .map(|&k| 1.0 / layout.team_size(k) as f64)
            .collect();
        let weighted = tape.scale_rows(per_row, &w)?;
        Ok(tape.sum(weighted))
    }
}

/// Intention of a single team from member observations and the global state.
pub fn encode_team_intention(
    net: &TeamIntentionNet,
    store: &ParamStore,
    team_obs: &[Vec<f64>],
    state: &[f64],
) -> Result<Vec<f64>> {
    if team_obs.is_empty() {
        return Err(Error::usage("team intention of an empty team"));
    }
    let width = team_obs[0].len();
    let layout = TeamLayout {
        rows: (0..team_obs.len()).map(|i| (0, i)).collect(),
        team_of_row: vec![0; team_obs.len()],
        members: vec![(0..team_obs.len()).collect()],
        team_step: vec![0],
        step_offset: vec![0],
    };
    let mut tape = Tape::new();
    let o = tape.constant(stack_rows(team_obs, width));
    let s = tape.row(state);
    let c = net.encode(&mut tape, store, o, s, &layout)?;
    Ok(tape.value(c).iter().copied().collect())
}

/// `(mean x, mean y, t / horizon)` of a team; positions already in `[0, 1]`.
pub fn team_spatiotemporal(positions: &[(f64, f64)], t: usize, horizon: usize) -> [f64; 3] {
    let n = positions.len().max(1) as f64;
    let (sx, sy) = positions.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    [sx / n, sy / n, t as f64 / horizon.max(1) as f64]
}

/// Labels from the graph joining each team to its nearest other team.
/// Nearest ties go to the lower index; labels are ordered by first team.
pub fn team_spatiotemporal_labels(features: &[[f64; 3]], time_weight: f64) -> Vec<usize> {
    let k = features.len();
    let dist = |a: &[f64; 3], b: &[f64; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + time_weight * (a[2] - b[2]).powi(2)
    };
    let mut g = AgentGraph::empty(k);
    for i in 0..k {
        let nearest = (0..k)
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(&features[i], &features[a]).total_cmp(&dist(&features[i], &features[b])));
        if let Some(j) = nearest {
            g.edges.insert((i.min(j), i.max(j)));
        }
    }
    let p = find_teams(&g);
    p.team_of.into_iter().map(|t| t.expect("every team labelled")).collect()
}

/// `max(0, |c_k - c_u|^2 - |c_k - c_v|^2 + margin)` on plain vectors.
pub fn triplet_value(ck: &[f64], cu: &[f64], cv: &[f64], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    (d(ck, cu) - d(ck, cv) + margin).max(0.0)
}

/// One random positive and one random negative per anchor; anchors lacking
/// either are skipped. Indices are local to `labels`.
pub fn sample_triplets<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (k, &lk) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&u| u != k && labels[u] == lk).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] != lk).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        out.push((k, pos[rng.gen_range(0..pos.len())], neg[rng.gen_range(0..neg.len())]));
    }
    out
}

/// Sum of hinge terms over `(anchor, positive, negative)` rows of `c`.
pub fn triplet_contrastive_loss(
    tape: &mut Tape,
    c: Var,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::zeros((1, 1))));
    }
    let pick = |f: fn(&(usize, usize, usize)) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let ck = tape.gather_rows(c, &pick(|t| t.0))?;
    let cu = tape.gather_rows(c, &pick(|t| t.1))?;
    let cv = tape.gather_rows(c, &pick(|t| t.2))?;
    let dp = tape.sub(ck, cu)?;
    let dp = tape.square(dp);
    let dp = tape.row_sum(dp);
    let dn = tape.sub(ck, cv)?;
    let dn = tape.square(dn);
    let dn = tape.row_sum(dn);
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok(tape.sum(hinge))
}

/// Triplet and prediction parts of the generator loss, each summed over
/// teams and averaged over steps.
#[derive(Clone, Copy, Debug)]
pub struct TeamLossParts {
    pub total: Var,
    pub contrastive: Var,
    pub prediction: Var,
}

/// Generator loss for a batch: triplets are global team indices.
#[allow(clippy::too_many_arguments)]
pub fn team_generator_loss(
    net: &TeamIntentionNet,
    tape: &mut Tape,
    store: &ParamStore,
    obs: Var,
    next_obs: Var,
    states: Var,
    layout: &TeamLayout,
    triplets: &[(usize, usize, usize)],
    cfg: &TeamIntentionConfig,
) -> Result<TeamLossParts> {
    let c = net.encode(tape, store, obs, states, layout)?;
    let contrastive = triplet_contrastive_loss(tape, c, triplets, cfg.margin)?;
    let prediction = net.prediction_loss(tape, store, obs, next_obs, c, layout)?;
    let weighted = tape.scale(prediction, cfg.lambda_tg);
    let sum = tape.add(contrastive, weighted)?;
    let total = tape.scale(sum, 1.0 / layout.n_steps().max(1) as f64);
    Ok(TeamLossParts {
        total,
        contrastive,
        prediction,
    })
}
