//! The combined objective `L_rec + L_KL + L_align + L_c` with per-term
//! switches and weights, evaluated on one batch.

use serde::{Deserialize, Serialize};

use crate::cesa::AlignPlan;
use crate::error::Result;
use crate::mlvae::{
    class_grad_logits, class_loss, kl_grad, kl_loss, rec_grad, rec_loss, Gradients, MlvaeModel,
    OutputGrads, Trace,
};
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub align: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            kl: 1.0,
            align: 1.0,
            class: 1.0,
        }
    }
}

/// Which terms contribute to the differentiated objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Terms {
    pub rec: bool,
    pub kl: bool,
    pub align: bool,
    pub class: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        rec: true,
        kl: true,
        align: true,
        class: true,
    };
    pub const VAE: Terms = Terms {
        rec: true,
        kl: true,
        align: false,
        class: false,
    };
    pub const SUPERVISED: Terms = Terms {
        rec: true,
        kl: true,
        align: false,
        class: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub align: Option<f64>,
    pub class: Option<f64>,
    /// Weighted sum of the enabled terms.
    pub total: f64,
}

pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub eps: &'a Matrix,
    pub labels: Option<&'a [usize]>,
    pub align: Option<&'a AlignPlan>,
}

fn losses(
    trace: &Trace,
    batch: &Batch<'_>,
    terms: Terms,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let rec = rec_loss(batch.x, &trace.x_hat)?;
    let kl = kl_loss(&trace.mu_d, &trace.sigma_d)?;
    let class = batch
        .labels
        .map(|l| class_loss(&trace.probs, l))
        .transpose()?;
    let align = batch.align.map(|p| p.loss(&trace.z_c));
    let mut total = 0.0;
    if terms.rec {
        total += w.rec * rec;
    }
    if terms.kl {
        total += w.kl * kl;
    }
    if let (true, Some(a)) = (terms.align, align) {
        total += w.align * a;
    }
    if let (true, Some(c)) = (terms.class, class) {
        total += w.class * c;
    }
    Ok(LossBreakdown {
        rec,
        kl,
        align,
        class,
        total,
    })
}

/// Forward pass only.
pub fn evaluate_loss(
    model: &MlvaeModel,
    batch: &Batch<'_>,
    terms: Terms,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let trace = model.forward_train(batch.x, batch.eps)?;
    losses(&trace, batch, terms, weights)
}

/// Loss breakdown plus gradients of the enabled, weighted terms.
pub fn loss_and_grads(
    model: &MlvaeModel,
    batch: &Batch<'_>,
    terms: Terms,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let trace = model.forward_train(batch.x, batch.eps)?;
    let report = losses(&trace, batch, terms, weights)?;
    let mut seeds = OutputGrads::default();
    if terms.rec {
        seeds.x_hat = Some(rec_grad(batch.x, &trace.x_hat)?.map(|g| g * weights.rec));
    }
    if terms.kl {
        let (dm, ds) = kl_grad(&trace.mu_d, &trace.sigma_d)?;
        seeds.mu_d = Some(dm.map(|g| g * weights.kl));
        seeds.sigma_d = Some(ds.map(|g| g * weights.kl));
    }
    if let (true, Some(plan)) = (terms.align, batch.align) {
        seeds.z_c = Some(plan.grad(&trace.z_c).map(|g| g * weights.align));
    }
    if let (true, Some(labels)) = (terms.class, batch.labels) {
        seeds.logits = Some(class_grad_logits(&trace.probs, labels)?.map(|g| g * weights.class));
    }
    let grads = model.backward(&trace, &seeds)?;
    Ok((report, grads))
}
