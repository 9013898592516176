use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over all coordinates.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Checks every coordinate of every parameter in `store`.
///
/// `loss_fn` must rebuild the loss from scratch on the given tape. It is
/// evaluated twice at the base point; any difference is reported as an error
/// since central differences are meaningless for a non-deterministic loss.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    epsilon: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    fn eval<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64>
    where
        F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.scalar(loss))
    }

    let saved: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();
    let base = {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        store.accumulate(&grads);
        tape.scalar(loss)
    };
    let again = eval(&mut loss_fn, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::usage(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        for k in 0..analytic.len() {
            let orig = store.value(id).as_slice().expect("contiguous")[k];
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = orig + epsilon;
            let plus = eval(&mut loss_fn, store)?;
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = orig - epsilon;
            let minus = eval(&mut loss_fn, store)?;
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.as_slice().expect("contiguous")[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                if rel >= report.max_relative_error {
                    report.worst = Some((store.name(id).to_string(), k));
                    report.worst_values = (a, numeric);
                }
            }
        }
    }

    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(saved) {
        store.set_grad(id, g);
    }
    Ok(report)
}
