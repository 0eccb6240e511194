//! Dense-network kernel: row-major matrices, layers with manual backprop,
//! Adam, and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod layer;
mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, ParamId, DENOM_FLOOR};
pub use layer::{sigmoid, softplus, Activation, DenseLayer, LayerCache, LayerGrads, Stack};
pub use matrix::{axpy, dot, squared_distance, Matrix};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
