//! Dense differentiable computation used by every network in the crate.

mod adam;
mod gaussian;
mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gaussian::{kl_diag_gaussian, reparameterize_sample, GaussianPosterior, LOG_VARIANCE_BOUNDS};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use mlp::{Activation, Linear, Mlp, MlpSpec, QNet};
pub use params::{ParamId, ParamStore, TensorRecord};
pub use tape::{Gradients, Tape, Tensor, Var};

/// Builds a `rows x cols` tensor from row-major values.
pub fn tensor(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec((rows, cols), values).expect("tensor shape matches values")
}

/// Stacks equal-length rows into a tensor.
pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        let r = r.as_ref();
        assert_eq!(r.len(), width, "row width");
        data.extend_from_slice(r);
    }
    tensor(rows.len(), width, data)
}
