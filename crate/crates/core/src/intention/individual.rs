use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::TeamLayout;
use crate::autodiff::{
    kl_diag_gaussian, reparameterize_sample, Activation, GaussianPosterior, Linear, Mlp, MlpSpec, ParamStore, Tape,
    Var, LOG_VARIANCE_BOUNDS,
};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualConfig {
    pub obs_width: usize,
    pub hidden: usize,
    /// Width of the individual cognition.
    pub cognition: usize,
    /// Width of the individual intention.
    pub dim: usize,
    /// Width of the team intention it is conditioned on.
    pub team_dim: usize,
}

/// Embedding, team aggregation, variational encoder and decoder.
#[derive(Clone, Debug)]
pub struct IndividualNet {
    pub phi: Mlp,
    pub psi: Mlp,
    pub encoder: Mlp,
    pub mean_head: Linear,
    pub log_variance_head: Linear,
    pub decoder: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct IndividualIntention {
    pub posterior: GaussianPosterior,
    pub zeta: Var,
    pub reconstruction: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConsensusLossParts {
    pub total: Var,
    pub reconstruction: Var,
    pub consensus: Var,
}

impl IndividualNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &IndividualConfig, rng: &mut R) -> Result<Self> {
        let relu = Activation::Relu;
        let h = cfg.hidden;
        Ok(Self {
            phi: Mlp::new(store, "ind.phi", MlpSpec::new(vec![cfg.obs_width, h], relu).with_output_activation(), rng)?,
            psi: Mlp::new(store, "ind.psi", MlpSpec::new(vec![2 * h, cfg.cognition], relu).with_output_activation(), rng)?,
            encoder: Mlp::new(
                store,
                "ind.varphi",
                MlpSpec::new(vec![cfg.cognition + cfg.team_dim, h], relu).with_output_activation(),
                rng,
            )?,
            mean_head: Linear::new(store, "ind.varphi.mean", h, cfg.dim, rng),
            log_variance_head: Linear::new(store, "ind.varphi.logvar", h, cfg.dim, rng),
            decoder: Mlp::new(store, "ind.decoder", MlpSpec::new(vec![cfg.dim, h, cfg.obs_width], relu), rng)?,
        })
    }

    pub fn encode_individual(&self, tape: &mut Tape, store: &ParamStore, obs: Var) -> Result<Var> {
        self.phi.forward(tape, store, obs)
    }

    /// `chi_i = g_psi(h_i, sum_{j in team(i)} h_j)`.
    pub fn team_cognition(&self, tape: &mut Tape, store: &ParamStore, h: Var, layout: &TeamLayout) -> Result<Var> {
        let sums = tape.segment_sum(h, &layout.team_of_row, layout.n_teams())?;
        let team_sum = tape.gather_rows(sums, &layout.team_of_row)?;
        let x = tape.concat_cols(&[h, team_sum])?;
        self.psi.forward(tape, store, x)
    }

    /// Posterior over the intention given cognition and team intention rows,
    /// a reparameterized sample and its reconstruction.
    pub fn variational_intention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        chi: Var,
        c_rows: Var,
        noise: Var,
    ) -> Result<IndividualIntention> {
        let x = tape.concat_cols(&[chi, c_rows])?;
        let z = self.encoder.forward(tape, store, x)?;
        let mean = self.mean_head.forward(tape, store, z)?;
        let raw = self.log_variance_head.forward(tape, store, z)?;
        let log_variance = tape.clamp(raw, LOG_VARIANCE_BOUNDS.0, LOG_VARIANCE_BOUNDS.1);
        let posterior = GaussianPosterior::new(tape, mean, log_variance)?;
        let zeta = reparameterize_sample(tape, &posterior, noise)?;
        let reconstruction = self.decoder.forward(tape, store, zeta)?;
        Ok(IndividualIntention {
            posterior,
            zeta,
            reconstruction,
        })
    }

    /// Full pipeline for a batch: returns cognition and intention. `c` holds
    /// one team intention per layout team.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        c: Var,
        noise: Var,
        layout: &TeamLayout,
    ) -> Result<(Var, IndividualIntention)> {
        let h = self.encode_individual(tape, store, obs)?;
        let chi = self.team_cognition(tape, store, h, layout)?;
        let c_rows = tape.gather_rows(c, &layout.team_of_row)?;
        let it = self.variational_intention(tape, store, chi, c_rows, noise)?;
        Ok((chi, it))
    }
}

/// Ordered teammate pairs `(i, j)`, `i != j`, with weight `1/(n_k - 1)`.
pub fn consensus_pairs(layout: &TeamLayout) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let (mut a, mut b, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for members in &layout.members {
        let n = members.len();
        if n < 2 {
            continue;
        }
        for &i in members {
            for &j in members {
                if i != j {
                    a.push(i);
                    b.push(j);
                    w.push(1.0 / (n - 1) as f64);
                }
            }
        }
    }
    (a, b, w)
}

/// `sum_i |o_i - o_hat_i|^2 + 1/(n_k-1) sum_{j != i} KL(q_i || q_j)`,
/// averaged over the steps of the layout.
pub fn consensus_vae_loss(
    tape: &mut Tape,
    obs: Var,
    reconstruction: Var,
    posterior: &GaussianPosterior,
    layout: &TeamLayout,
) -> Result<ConsensusLossParts> {
    let diff = tape.sub(reconstruction, obs)?;
    let sq = tape.square(diff);
    let recon = tape.sum(sq);
    let (a, b, w) = consensus_pairs(layout);
    let consensus = if a.is_empty() {
        tape.constant(crate::autodiff::Tensor::zeros((1, 1)))
    } else {
        let p = GaussianPosterior {
            mean: tape.gather_rows(posterior.mean, &a)?,
            log_variance: tape.gather_rows(posterior.log_variance, &a)?,
        };
        let q = GaussianPosterior {
            mean: tape.gather_rows(posterior.mean, &b)?,
            log_variance: tape.gather_rows(posterior.log_variance, &b)?,
        };
        let kl = kl_diag_gaussian(tape, &p, &q)?;
        let weighted = tape.scale_rows(kl, &w)?;
        tape.sum(weighted)
    };
    let sum = tape.add(recon, consensus)?;
    let total = tape.scale(sum, 1.0 / layout.n_steps().max(1) as f64);
    Ok(ConsensusLossParts {
        total,
        reconstruction: recon,
        consensus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, stack_rows, Adam, AdamConfig, Tensor};
    use crate::org::TeamPartition;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> IndividualConfig {
        IndividualConfig {
            obs_width: 5,
            hidden: 6,
            cognition: 4,
            dim: 3,
            team_dim: 2,
        }
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Tensor {
        Tensor::from_shape_simple_fn((n, w), || rng.gen_range(-1.0..1.0))
    }

    fn normal(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Tensor {
        Tensor::from_shape_simple_fn((n, w), || rng.sample(StandardNormal))
    }

    #[test]
    fn embedding_is_local_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let o = rows(&mut rng, 1, 5);
        let mut tape = Tape::new();
        let x = tape.constant(ndarray::concatenate![ndarray::Axis(0), o.view(), o.view()]);
        let h = net.encode_individual(&mut tape, &store, x).unwrap();
        let v = tape.value(h);
        assert_eq!(v.row(0), v.row(1));
        for l in net.phi.layers() {
            store.value_mut(l.weight).fill(0.0);
            store.value_mut(l.bias).fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(o);
        let h = net.encode_individual(&mut tape, &store, x).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let o = rows(&mut rng, 3, 5);
        let report = finite_diff_check(&mut store, 1e-6, |tape, store| {
            let x = tape.constant(o.clone());
            let h = net.encode_individual(tape, store, x)?;
            let sq = tape.square(h);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn cognition_uses_team_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let h = rows(&mut rng, 3, 6);
        let p = TeamPartition::from_labels(&[Some(0), Some(1), Some(0)]);
        let layout = TeamLayout::new(&[&p]).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let chi = net.team_cognition(&mut tape, &store, hv, &layout).unwrap();
        let chi = tape.value(chi).clone();
        let direct = |own: usize, sum: Vec<f64>| {
            let mut x: Vec<f64> = h.row(own).to_vec();
            x.extend(sum);
            let mut t = Tape::new();
            let xv = t.row(&x);
            let y = net.psi.forward(&mut t, &store, xv).unwrap();
            t.value(y).row(0).to_vec()
        };
        let pair_sum: Vec<f64> = (0..6).map(|c| h[[0, c]] + h[[2, c]]).collect();
        let solo: Vec<f64> = h.row(1).to_vec();
        for (r, expect) in [(0, direct(0, pair_sum.clone())), (1, direct(1, solo)), (2, direct(2, pair_sum))] {
            for (a, b) in chi.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cognition_ignores_teammate_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let h = rows(&mut rng, 4, 6);
        let p = TeamPartition::from_labels(&[Some(0); 4]);
        let layout = TeamLayout::new(&[&p]).unwrap();
        let perm = [0usize, 3, 1, 2];
        let hp = Tensor::from_shape_fn((4, 6), |(r, c)| h[[perm[r], c]]);
        let mut tape = Tape::new();
        let a = tape.constant(h);
        let b = tape.constant(hp);
        let ca = net.team_cognition(&mut tape, &store, a, &layout).unwrap();
        let cb = net.team_cognition(&mut tape, &store, b, &layout).unwrap();
        assert!((tape.value(ca).row(0).to_owned() - tape.value(cb).row(0)).iter().all(|d| d.abs() <= 1e-9));
    }

    #[test]
    fn tiny_variance_sample_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        store.value_mut(net.log_variance_head.weight).fill(0.0);
        store.value_mut(net.log_variance_head.bias).fill(-1e3);
        let mut tape = Tape::new();
        let chi = tape.constant(rows(&mut rng, 2, 4));
        let c = tape.constant(rows(&mut rng, 2, 2));
        let noise = tape.constant(normal(&mut rng, 2, 3));
        let it = net.variational_intention(&mut tape, &store, chi, c, noise).unwrap();
        let bound = (LOG_VARIANCE_BOUNDS.0 / 2.0).exp();
        for ((z, m), e) in tape.value(it.zeta).iter().zip(tape.value(it.posterior.mean)).zip(tape.value(noise)) {
            assert!((z - m).abs() <= bound * e.abs() + 1e-15);
        }
        let again = net.variational_intention(&mut tape, &store, chi, c, noise).unwrap();
        assert_eq!(tape.value(it.zeta), tape.value(again.zeta));
    }

    #[test]
    fn sample_statistics_match_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let chi = rows(&mut rng, 1, 4);
        let c = rows(&mut rng, 1, 2);
        let draws = 100_000;
        let mut tape = Tape::new();
        let chi_v = tape.constant(chi.broadcast((draws, 4)).unwrap().to_owned());
        let c_v = tape.constant(c.broadcast((draws, 2)).unwrap().to_owned());
        let noise = tape.constant(normal(&mut rng, draws, 3));
        let it = net.variational_intention(&mut tape, &store, chi_v, c_v, noise).unwrap();
        let z = tape.value(it.zeta);
        for d in 0..3 {
            let mu = tape.value(it.posterior.mean)[[0, d]];
            let var = tape.value(it.posterior.log_variance)[[0, d]].exp();
            let col = z.column(d);
            let mean = col.mean().unwrap();
            let emp_var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            assert!((mean - mu).abs() <= 0.05 * mu.abs().max(var.sqrt()), "{mean} vs {mu}");
            assert!((emp_var - var).abs() <= 0.05 * var, "{emp_var} vs {var}");
        }
    }

    fn loss_of(mu: Tensor, lv: Tensor, obs: Tensor, recon: Tensor, p: &TeamPartition) -> (f64, f64, f64) {
        let layout = TeamLayout::new(&[p]).unwrap();
        let mut tape = Tape::new();
        let post = GaussianPosterior {
            mean: tape.constant(mu),
            log_variance: tape.constant(lv),
        };
        let o = tape.constant(obs);
        let r = tape.constant(recon);
        let parts = consensus_vae_loss(&mut tape, o, r, &post, &layout).unwrap();
        (tape.scalar(parts.total), tape.scalar(parts.reconstruction), tape.scalar(parts.consensus))
    }

    #[test]
    fn consensus_examples() {
        let team = TeamPartition::from_labels(&[Some(0), Some(0)]);
        let o = array![[1.0, 2.0], [3.0, 4.0]];
        let same = loss_of(array![[0.3], [0.3]], array![[0.1], [0.1]], o.clone(), o.clone(), &team);
        assert_eq!(same.0, 0.0);
        let kl = loss_of(array![[1.0], [0.0]], array![[0.0], [0.0]], o.clone(), o.clone(), &team);
        assert!((kl.0 - 1.0).abs() < 1e-12);
        let recon = loss_of(array![[0.0], [0.0]], array![[0.0], [0.0]], o.clone(), array![[1.5, 2.0], [3.0, 2.0]], &team);
        assert_eq!(recon.1, 0.25 + 4.0);
        let solo = TeamPartition::from_labels(&[Some(0), Some(1)]);
        let apart = loss_of(array![[5.0], [0.0]], array![[1.0], [0.0]], o.clone(), o, &solo);
        assert_eq!(apart.2, 0.0);
    }

    #[test]
    fn consensus_is_order_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mu = rows(&mut rng, 3, 2);
            let lv = rows(&mut rng, 3, 2);
            let o = rows(&mut rng, 3, 2);
            let r = rows(&mut rng, 3, 2);
            let team = TeamPartition::from_labels(&[Some(0); 3]);
            let a = loss_of(mu.clone(), lv.clone(), o.clone(), r.clone(), &team);
            let perm = |t: &Tensor| Tensor::from_shape_fn((3, 2), |(i, j)| t[[[2, 0, 1][i], j]]);
            let b = loss_of(perm(&mu), perm(&lv), perm(&o), perm(&r), &team);
            assert!(a.2 > 0.0);
            assert!((a.0 - b.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vae_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let p = TeamPartition::from_labels(&[Some(0), Some(0), Some(1), Some(0)]);
        let layout = TeamLayout::new(&[&p]).unwrap();
        let obs = rows(&mut rng, 4, 5);
        let c = rows(&mut rng, 2, 2);
        let noise = normal(&mut rng, 4, 3);
        let report = finite_diff_check(&mut store, 1e-6, |tape, store| {
            let o = tape.constant(obs.clone());
            let cv = tape.constant(c.clone());
            let n = tape.constant(noise.clone());
            let (_, it) = net.forward(tape, store, o, cv, n, &layout)?;
            Ok(consensus_vae_loss(tape, o, it.reconstruction, &it.posterior, &layout)?.total)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn consensus_is_attainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let net = IndividualNet::new(&mut store, &cfg(), &mut rng).unwrap();
        let p = TeamPartition::from_labels(&[Some(0); 4]);
        let layout = TeamLayout::new(&[&p]).unwrap();
        let chi = rows(&mut rng, 4, 4);
        let c = stack_rows(&[[0.2, -0.4]; 4], 2);
        let noise = Tensor::zeros((4, 3));
        let mut adam = Adam::new(&store, AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() });
        let mut max_kl = f64::INFINITY;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let x = tape.constant(chi.clone());
            let cv = tape.constant(c.clone());
            let n = tape.constant(noise.clone());
            let it = net.variational_intention(&mut tape, &store, x, cv, n).unwrap();
            let (a, b, w) = consensus_pairs(&layout);
            let pa = GaussianPosterior {
                mean: tape.gather_rows(it.posterior.mean, &a).unwrap(),
                log_variance: tape.gather_rows(it.posterior.log_variance, &a).unwrap(),
            };
            let pb = GaussianPosterior {
                mean: tape.gather_rows(it.posterior.mean, &b).unwrap(),
                log_variance: tape.gather_rows(it.posterior.log_variance, &b).unwrap(),
            };
            let kl = kl_diag_gaussian(&mut tape, &pa, &pb).unwrap();
            max_kl = tape.value(kl).iter().copied().fold(0.0, f64::max);
            let wk = tape.scale_rows(kl, &w).unwrap();
            let loss = tape.sum(wk);
            let g = tape.backward(loss).unwrap();
            store.accumulate(&g);
            adam.step(&mut store).unwrap();
        }
        assert!(max_kl < 1e-3, "{max_kl}");
    }
}
