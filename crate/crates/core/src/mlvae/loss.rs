//! Batch-mean loss terms and their gradients.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// `0.5 Σ (μ² + σ² − ln σ² − 1)` per sample, averaged over the batch.
pub fn kl_loss(mu: &Matrix, sigma: &Matrix) -> Result<f64> {
    check_same(mu, sigma, "kl_loss")?;
    if let Some(s) = sigma.data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be > 0, got {s}")));
    }
    let sum: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| m * m + s * s - (s * s).ln() - 1.0)
        .sum();
    Ok(0.5 * sum / batch(mu))
}

/// `(dL/dμ, dL/dσ)` for [`kl_loss`].
pub fn kl_grad(mu: &Matrix, sigma: &Matrix) -> Result<(Matrix, Matrix)> {
    check_same(mu, sigma, "kl_grad")?;
    let b = batch(mu);
    let d_mu = mu.map(|m| m / b);
    let d_sigma = sigma.map(|s| (s - 1.0 / s) / b);
    Ok((d_mu, d_sigma))
}

/// Squared Euclidean reconstruction error per sample, averaged over the batch.
pub fn rec_loss(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    check_same(x, x_hat, "rec_loss")?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / batch(x))
}

pub fn rec_grad(x: &Matrix, x_hat: &Matrix) -> Result<Matrix> {
    check_same(x, x_hat, "rec_grad")?;
    let b = batch(x);
    let data = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, h)| 2.0 * (h - a) / b)
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Mean categorical cross-entropy `−ln p[label]`.
pub fn class_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.get(i, l).ln())
        .sum();
    Ok(sum / batch(probs))
}

/// Gradient of [`class_loss`] with respect to the softmax logits.
pub fn class_grad_logits(probs: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(probs, labels)?;
    let b = batch(probs);
    let mut g = probs.map(|p| p / b);
    for (i, &l) in labels.iter().enumerate() {
        let v = g.get(i, l);
        g.set(i, l, v - 1.0 / b);
    }
    Ok(g)
}

fn batch(m: &Matrix) -> f64 {
    m.rows().max(1) as f64
}

fn check_same(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape {
            op: "class_loss",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::Input(format!(
            "label {l} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(())
}
