//! Finite-difference verification of every loss term on a small seeded model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cesa::{AlignPlan, KernelConfig, RepresentationMemory};
use crate::domain::DomainKey;
use crate::error::Result;
use crate::mlvae::{Architecture, DomainNoiseBuffer, MlvaeModel};
use crate::nn::{gradient_check, GradCheckReport, Matrix};
use crate::objective::{evaluate_loss, loss_and_grads, Batch, LossWeights, Terms};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Shape of the checked problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeShape {
    pub n_aps: usize,
    pub n_rps: usize,
    pub batch: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        Self {
            n_aps: 4,
            n_rps: 3,
            batch: 6,
        }
    }
}

struct Problem {
    model: MlvaeModel,
    x: Matrix,
    eps: Matrix,
    labels: Vec<usize>,
    plan: AlignPlan,
}

fn problem(seed: u64, shape: ProbeShape, arch: Architecture) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MlvaeModel::new(arch, &mut rng)?;
    let x = Matrix::from_vec(
        shape.batch,
        shape.n_aps,
        (0..shape.batch * shape.n_aps)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect(),
    )?;
    let labels: Vec<usize> = (0..shape.batch).map(|i| i % shape.n_rps).collect();
    let mut noise = DomainNoiseBuffer::new(model.latent_dim(), seed);
    let eps = noise.batch_noise(&DomainKey::new("probe", 0), shape.batch);
    let mut memory = RepresentationMemory::new(shape.n_rps, 1, model.latent_dim(), seed)?;
    for rp in 0..shape.n_rps {
        let z: Vec<f64> = (0..model.latent_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        memory.reservoir_insert(rp, &z)?;
    }
    let z_c = model.encode_class(&x)?;
    let plan = AlignPlan::new(&z_c, &memory, Some(&labels), &KernelConfig::default())?
        .expect("memory is filled");
    Ok(Problem {
        model,
        x,
        eps,
        labels,
        plan,
    })
}

/// The single terms, both adaptation stages, and the full sum.
pub fn checked_terms() -> Vec<(&'static str, Terms)> {
    let only = |rec, kl, align, class| Terms {
        rec,
        kl,
        align,
        class,
    };
    vec![
        ("rec", only(true, false, false, false)),
        ("kl", only(false, true, false, false)),
        ("align", only(false, false, true, false)),
        ("class", only(false, false, false, true)),
        ("stage1", Terms::VAE),
        ("stage2", only(false, false, true, true)),
        ("total", Terms::ALL),
    ]
}

pub fn check_term(
    seed: u64,
    shape: ProbeShape,
    arch: Architecture,
    terms: Terms,
) -> Result<GradCheckReport> {
    let p = problem(seed, shape, arch)?;
    let weights = LossWeights::default();
    let batch = Batch {
        x: &p.x,
        eps: &p.eps,
        labels: Some(&p.labels),
        align: Some(&p.plan),
    };
    let (_, grads) = loss_and_grads(&p.model, &batch, terms, &weights)?;
    let params = p.model.flat_params();
    let layout = p.model.layout();
    let mut probe = p.model.clone();
    gradient_check(
        |theta| {
            probe.set_flat_params(theta).expect("same layout");
            evaluate_loss(&probe, &batch, terms, &weights)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        },
        &params,
        &grads.flat(),
        &layout,
        FD_STEP,
        FD_TOLERANCE,
    )
}

/// Runs every entry of [`checked_terms`] on the compact architecture.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<TermCheck>> {
    let shape = ProbeShape::default();
    checked_terms()
        .into_iter()
        .map(|(name, terms)| {
            Ok(TermCheck {
                name: name.to_string(),
                report: check_term(
                    seed,
                    shape,
                    Architecture::compact(shape.n_aps, shape.n_rps),
                    terms,
                )?,
            })
        })
        .collect()
}
