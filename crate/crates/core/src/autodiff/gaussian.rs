use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Lower and upper bounds applied to predicted log-variances before they are
/// exponentiated.
pub const LOG_VARIANCE_BOUNDS: (f64, f64) = (-10.0, 10.0);

/// Diagonal Gaussian recorded on a tape; one distribution per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianPosterior {
    pub fn new(tape: &Tape, mean: Var, log_variance: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(log_variance) {
            return Err(Error::usage(format!(
                "posterior mean {:?} and log-variance {:?} differ in shape",
                tape.shape(mean),
                tape.shape(log_variance)
            )));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mean).1
    }
}

/// `KL(p || q)` for diagonal Gaussians, one value per row (`n x 1`).
pub fn kl_diag_gaussian(
    tape: &mut Tape,
    p: &GaussianPosterior,
    q: &GaussianPosterior,
) -> Result<Var> {
    if tape.shape(p.mean) != tape.shape(q.mean) {
        return Err(Error::usage(format!(
            "KL between posteriors of shape {:?} and {:?}",
            tape.shape(p.mean),
            tape.shape(q.mean)
        )));
    }
    let dlv = tape.sub(q.log_variance, p.log_variance)?;
    let log_ratio = tape.scale(dlv, 0.5);
    let var_p = tape.exp(p.log_variance);
    let dmu = tape.sub(p.mean, q.mean)?;
    let dmu2 = tape.square(dmu);
    let num = tape.add(var_p, dmu2)?;
    let neg_lvq = tape.scale(q.log_variance, -1.0);
    let inv_var_q = tape.exp(neg_lvq);
    let ratio = tape.mul(num, inv_var_q)?;
    let half_ratio = tape.scale(ratio, 0.5);
    let terms = tape.add(log_ratio, half_ratio)?;
    let terms = tape.add_scalar(terms, -0.5);
    Ok(tape.row_sum(terms))
}

/// `mean + exp(log_variance / 2) * noise`. The noise is treated as a
/// constant so gradients reach only the posterior parameters.
pub fn reparameterize_sample(
    tape: &mut Tape,
    post: &GaussianPosterior,
    noise: Var,
) -> Result<Var> {
    if tape.shape(noise) != tape.shape(post.mean) {
        return Err(Error::usage(format!(
            "noise shape {:?} does not match posterior {:?}",
            tape.shape(noise),
            tape.shape(post.mean)
        )));
    }
    let half = tape.scale(post.log_variance, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, noise)?;
    tape.add(post.mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn post(tape: &mut Tape, mu: &[f64], lv: &[f64]) -> GaussianPosterior {
        let m = tape.input(Array2::from_shape_vec((1, mu.len()), mu.to_vec()).unwrap());
        let l = tape.input(Array2::from_shape_vec((1, lv.len()), lv.to_vec()).unwrap());
        GaussianPosterior::new(tape, m, l).unwrap()
    }

    // closed form, written independently of the tape version
    fn kl_closed(mp: &[f64], lvp: &[f64], mq: &[f64], lvq: &[f64]) -> f64 {
        (0..mp.len())
            .map(|d| {
                let (sp2, sq2) = (lvp[d].exp(), lvq[d].exp());
                0.5 * (sq2 / sp2).ln() + (sp2 + (mp[d] - mq[d]).powi(2)) / (2.0 * sq2) - 0.5
            })
            .sum()
    }

    #[test]
    fn kl_of_identical_posteriors_is_zero() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[0.3, -1.2, 4.0], &[0.5, -2.0, 1.0]);
        let q = post(&mut tape, &[0.3, -1.2, 4.0], &[0.5, -2.0, 1.0]);
        let kl = kl_diag_gaussian(&mut tape, &p, &q).unwrap();
        assert!(tape.scalar(kl).abs() <= 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[1.0], &[0.0]);
        let q = post(&mut tape, &[0.0], &[0.0]);
        let kl = kl_diag_gaussian(&mut tape, &p, &q).unwrap();
        assert!((tape.scalar(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_matches_closed_form_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u = Uniform::new(-3.0, 3.0);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..16).map(|_| u.sample(&mut rng)).collect();
            let (mp, lvp, mq, lvq) = (&v[0..4], &v[4..8], &v[8..12], &v[12..16]);
            let mut tape = Tape::new();
            let p = post(&mut tape, mp, lvp);
            let q = post(&mut tape, mq, lvq);
            let kl = kl_diag_gaussian(&mut tape, &p, &q).unwrap();
            let kl = tape.scalar(kl);
            assert!(kl >= 0.0);
            assert!((kl - kl_closed(mp, lvp, mq, lvq)).abs() < 1e-9 * (1.0 + kl));
        }
    }

    #[test]
    fn kl_length_mismatch_is_usage_error() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[1.0, 2.0], &[0.0, 0.0]);
        let q = post(&mut tape, &[1.0], &[0.0]);
        assert!(matches!(kl_diag_gaussian(&mut tape, &p, &q), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_noise_returns_mean_exactly() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[0.25, -7.0], &[3.0, -1.0]);
        let noise = tape.constant(array![[0.0, 0.0]]);
        let z = reparameterize_sample(&mut tape, &p, noise).unwrap();
        assert_eq!(tape.value(z), &array![[0.25, -7.0]]);
    }

    #[test]
    fn vanishing_variance_collapses_to_mean() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[1.5, -0.5], &[-40.0, -40.0]);
        let noise = tape.constant(array![[2.7, -3.1]]);
        let z = reparameterize_sample(&mut tape, &p, noise).unwrap();
        assert!((tape.value(z)[[0, 0]] - 1.5).abs() < 1e-8);
        assert!((tape.value(z)[[0, 1]] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn gradient_reaches_posterior_not_noise() {
        let mut tape = Tape::new();
        let p = post(&mut tape, &[0.5], &[0.4]);
        let noise = tape.constant(array![[1.3]]);
        let z = reparameterize_sample(&mut tape, &p, noise).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p.mean).unwrap()[[0, 0]], 1.0);
        let expect = 0.5 * (0.2f64).exp() * 1.3;
        assert!((g.wrt(p.log_variance).unwrap()[[0, 0]] - expect).abs() < 1e-14);
        assert!(g.wrt(noise).is_none());
    }

    #[test]
    fn monte_carlo_variance_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(Array2::zeros((n, 1)));
        let l = tape.constant(Array2::from_elem((n, 1), 4f64.ln()));
        let p = GaussianPosterior::new(&tape, m, l).unwrap();
        let e = tape.constant(Array2::from_shape_vec((n, 1), noise).unwrap());
        let z = reparameterize_sample(&mut tape, &p, e).unwrap();
        let zs = tape.value(z);
        let mean = zs.sum() / n as f64;
        let var = zs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 4.0).abs() / 4.0 < 0.05, "{var}");
    }

    #[test]
    fn sampling_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let p = post(&mut tape, &[0.1, 0.2], &[-0.3, 0.7]);
            let e = tape.constant(array![[0.9, -1.1]]);
            let z = reparameterize_sample(&mut tape, &p, e).unwrap();
            tape.value(z).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
