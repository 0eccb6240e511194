//! Class-embedding statistical alignment: a per-RP reservoir of class
//! latents captured during supervised onboarding, and a kernel MMD between
//! current class latents and that memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlvae::{class_grad_logits, class_loss, Block, MlvaeModel};
use crate::nn::{softmax_rows, squared_distance, AdamState, Matrix};

/// Bandwidth multipliers applied to the median pairwise distance.
pub const MEDIAN_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bandwidths {
    /// `{γ/4, γ/2, γ, 2γ, 4γ}` with `γ` the median pairwise distance of the
    /// pooled sample, recomputed on every call.
    Median,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMode {
    /// Current batch against every stored prototype.
    Pooled,
    /// Mean over RPs of the MMD between same-label latents and that RP's prototypes.
    PerClass,
}

/// RBF-mixture kernel, biased V-statistic estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidths: Bandwidths,
    pub mode: AlignMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidths: Bandwidths::Median,
            mode: AlignMode::Pooled,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::Input(format!(
                "bandwidths must be non-empty and positive, got {bandwidths:?}"
            )));
        }
        Ok(Self {
            bandwidths: Bandwidths::Fixed(bandwidths),
            mode: AlignMode::Pooled,
        })
    }

    pub fn resolve(&self, a: &Matrix, b: &Matrix) -> Vec<f64> {
        match &self.bandwidths {
            Bandwidths::Fixed(v) => v.clone(),
            Bandwidths::Median => {
                let g = median_pairwise_distance(a, b);
                MEDIAN_MULTIPLIERS.iter().map(|m| m * g).collect()
            }
        }
    }
}

/// Median Euclidean distance over distinct pairs of the pooled rows; 1.0 when
/// there are no pairs or every pair coincides.
pub fn median_pairwise_distance(a: &Matrix, b: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(squared_distance(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[inline]
fn kernel(sq_dist: f64, gammas: &[f64]) -> f64 {
    gammas
        .iter()
        .map(|g| (-sq_dist / (2.0 * g * g)).exp())
        .sum()
}

fn within_mean(m: &Matrix, gammas: &[f64]) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += kernel(squared_distance(m.row(i), m.row(j)), gammas);
        }
    }
    s / (n * n) as f64
}

fn cross_mean(a: &Matrix, b: &Matrix, gammas: &[f64]) -> f64 {
    // summed in sorted order so swapping the arguments is bit-exact
    let mut v = Vec::with_capacity(a.rows() * b.rows());
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            v.push(kernel(squared_distance(ra, rb), gammas));
        }
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
}

/// Biased MMD² with explicit bandwidths. Both sets must be non-empty.
pub fn mmd_with_bandwidths(a: &Matrix, b: &Matrix, gammas: &[f64]) -> f64 {
    within_mean(a, gammas) + within_mean(b, gammas) - 2.0 * cross_mean(a, b, gammas)
}

/// Gradient of [`mmd_with_bandwidths`] with respect to the rows of `a`.
pub fn mmd_grad_first(a: &Matrix, b: &Matrix, gammas: &[f64]) -> Matrix {
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let mut g = Matrix::zeros(a.rows(), a.cols());
    // d/da_i k(a_i, y) = -Σ_γ k_γ (a_i - y) / γ²
    let weight = |sq: f64| -> f64 {
        gammas
            .iter()
            .map(|gm| (-sq / (2.0 * gm * gm)).exp() / (gm * gm))
            .sum()
    };
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut acc = vec![0.0; a.cols()];
        for j in 0..a.rows() {
            let aj = a.row(j);
            let w = -2.0 / (n * n) * weight(squared_distance(ai, aj));
            for k in 0..acc.len() {
                acc[k] += w * (ai[k] - aj[k]);
            }
        }
        for bj in b.iter_rows() {
            let w = 2.0 / (n * m) * weight(squared_distance(ai, bj));
            for k in 0..acc.len() {
                acc[k] += w * (ai[k] - bj[k]);
            }
        }
        g.row_mut(i).copy_from_slice(&acc);
    }
    g
}

/// MMD between current latents and prototypes. `None` means alignment was
/// skipped because one side is empty.
pub fn mmd_loss(current: &Matrix, prototypes: &Matrix, cfg: &KernelConfig) -> Result<Option<f64>> {
    if current.rows() == 0 || prototypes.rows() == 0 {
        return Ok(None);
    }
    if current.cols() != prototypes.cols() {
        return Err(Error::Shape {
            op: "mmd_loss",
            left: current.shape(),
            right: prototypes.shape(),
        });
    }
    let gammas = cfg.resolve(current, prototypes);
    Ok(Some(mmd_with_bandwidths(current, prototypes, &gammas)))
}

/// One alignment target already resolved against a batch.
#[derive(Debug, Clone)]
pub struct AlignPlan {
    /// `(rows of the batch, prototypes, bandwidths, weight)` per group.
    groups: Vec<(Vec<usize>, Matrix, Vec<f64>, f64)>,
}

impl AlignPlan {
    /// Resolves bandwidths once so they stay constant through differentiation.
    /// `labels` are required for [`AlignMode::PerClass`].
    pub fn new(
        current: &Matrix,
        memory: &RepresentationMemory,
        labels: Option<&[usize]>,
        cfg: &KernelConfig,
    ) -> Result<Option<Self>> {
        if current.rows() == 0 || memory.total() == 0 {
            return Ok(None);
        }
        let groups = match (cfg.mode, labels) {
            (AlignMode::Pooled, _) => {
                let protos = memory.prototypes();
                let gammas = cfg.resolve(current, &protos);
                vec![((0..current.rows()).collect(), protos, gammas, 1.0)]
            }
            (AlignMode::PerClass, Some(labels)) => {
                let mut groups = Vec::new();
                for rp in 0..memory.n_rps() {
                    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == rp).collect();
                    let protos = memory.prototypes_for(rp);
                    if rows.is_empty() || protos.rows() == 0 {
                        continue;
                    }
                    let sub = current.select_rows(&rows);
                    let gammas = cfg.resolve(&sub, &protos);
                    groups.push((rows, protos, gammas, 1.0));
                }
                let k = groups.len() as f64;
                for g in &mut groups {
                    g.3 = 1.0 / k;
                }
                groups
            }
            (AlignMode::PerClass, None) => {
                return Err(Error::Input("per-class alignment needs labels".into()))
            }
        };
        if groups.is_empty() {
            return Ok(None);
        }
        Ok(Some(Self { groups }))
    }

    pub fn loss(&self, current: &Matrix) -> f64 {
        self.groups
            .iter()
            .map(|(rows, protos, gammas, w)| {
                w * mmd_with_bandwidths(&current.select_rows(rows), protos, gammas)
            })
            .sum()
    }

    pub fn grad(&self, current: &Matrix) -> Matrix {
        let mut g = Matrix::zeros(current.rows(), current.cols());
        for (rows, protos, gammas, w) in &self.groups {
            let sub = mmd_grad_first(&current.select_rows(rows), protos, gammas);
            for (k, &r) in rows.iter().enumerate() {
                for (dst, src) in g.row_mut(r).iter_mut().zip(sub.row(k)) {
                    *dst += w * src;
                }
            }
        }
        g
    }
}

/// Per-RP reservoir of class latents. Holds only latents, never fingerprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMemory {
    n_rps: usize,
    capacity: usize,
    dim: usize,
    seed: u64,
    rng: ChaCha8Rng,
    slots: Vec<Vec<Vec<f64>>>,
    seen: Vec<u64>,
}

impl RepresentationMemory {
    pub fn new(n_rps: usize, capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_rps == 0 || capacity == 0 || dim == 0 {
            return Err(Error::Input(format!(
                "memory needs n_rps, capacity, dim > 0 (got {n_rps}, {capacity}, {dim})"
            )));
        }
        Ok(Self {
            n_rps,
            capacity,
            dim,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            slots: vec![Vec::new(); n_rps],
            seen: vec![0; n_rps],
        })
    }

    pub fn n_rps(&self) -> usize {
        self.n_rps
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn seen(&self, rp: usize) -> u64 {
        self.seen.get(rp).copied().unwrap_or(0)
    }

    pub fn slot(&self, rp: usize) -> &[Vec<f64>] {
        self.slots.get(rp).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn covered_rps(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_empty()).count()
    }

    /// Reservoir sampling within the RP's stratum: the k-th latent is kept
    /// with probability `min(1, capacity / k)` and replaces a uniformly chosen
    /// occupant. Returns whether it was stored.
    pub fn reservoir_insert(&mut self, rp: usize, z_c: &[f64]) -> Result<bool> {
        if rp >= self.n_rps {
            return Err(Error::Input(format!(
                "rp {rp} out of range for {} RPs",
                self.n_rps
            )));
        }
        if z_c.len() != self.dim {
            return Err(Error::Shape {
                op: "reservoir_insert",
                left: (1, z_c.len()),
                right: (1, self.dim),
            });
        }
        self.seen[rp] += 1;
        let k = self.seen[rp];
        let slot = &mut self.slots[rp];
        if slot.len() < self.capacity {
            slot.push(z_c.to_vec());
            return Ok(true);
        }
        let j = self.rng.gen_range(0..k);
        if (j as usize) < self.capacity {
            slot[j as usize] = z_c.to_vec();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// All prototypes, RP-major.
    pub fn prototypes(&self) -> Matrix {
        let rows: Vec<&Vec<f64>> = self.slots.iter().flatten().collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows).expect("uniform latent width")
    }

    pub fn prototypes_for(&self, rp: usize) -> Matrix {
        let s = self.slot(rp);
        if s.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(s).expect("uniform latent width")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// `None` when the alignment term was skipped.
    pub align_loss: Option<f64>,
    pub class_loss: f64,
    pub classifier_grad_norm: f64,
    pub batch: usize,
    pub skipped: bool,
}

/// One stage-2 update: encoder and decoder frozen, classifier trained on the
/// pseudo labels. The alignment term is evaluated against the memory and
/// reported; it has no path to the classifier parameters. `memory = None`
/// skips alignment entirely.
pub fn align_step(
    model: &mut MlvaeModel,
    x: &Matrix,
    pseudo_labels: &[usize],
    memory: Option<&RepresentationMemory>,
    cfg: &KernelConfig,
    class_weight: f64,
    adam: &mut AdamState,
) -> Result<AlignReport> {
    if x.rows() == 0 {
        log::warn!("align_step called with an empty pseudo-labelled batch");
        return Ok(AlignReport {
            align_loss: None,
            class_loss: 0.0,
            classifier_grad_norm: 0.0,
            batch: 0,
            skipped: true,
        });
    }
    if memory.is_some_and(|m| m.total() == 0) {
        return Err(Error::Precondition(
            "representation memory is empty; onboard a device first".into(),
        ));
    }
    let z_c = model.encode_class(x)?;
    let align_loss = match memory {
        Some(mem) => AlignPlan::new(&z_c, mem, Some(pseudo_labels), cfg)?.map(|p| p.loss(&z_c)),
        None => None,
    };

    let caches = model.classifier.forward_cached(&z_c)?;
    let probs = softmax_rows(&caches.last().expect("classifier layers").output);
    let class_loss = class_loss(&probs, pseudo_labels)?;
    let d_logits = class_grad_logits(&probs, pseudo_labels)?.map(|g| g * class_weight);
    let (_, grads) = model.classifier.backward(&caches, &d_logits)?;

    let grad_blocks: Vec<&[f64]> = grads.iter().flat_map(|g| g.blocks()).collect();
    let norm = grad_blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    adam.step(&mut model.blocks_mut(Block::Classifier), &grad_blocks)?;
    Ok(AlignReport {
        align_loss,
        class_loss,
        classifier_grad_norm: norm,
        batch: x.rows(),
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn singleton_closed_form() {
        let cfg = KernelConfig::fixed(vec![1.0 / 2f64.sqrt()]).unwrap();
        let v = mmd_loss(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &cfg)
            .unwrap()
            .unwrap();
        let expected = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.264241).abs() < 1e-6);
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = m(3, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, 2.0]);
        let v = mmd_loss(&a, &a, &KernelConfig::default()).unwrap().unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn empty_side_is_skipped() {
        let a = m(2, 2, &[0.0; 4]);
        let empty = Matrix::zeros(0, 2);
        assert_eq!(
            mmd_loss(&a, &empty, &KernelConfig::default()).unwrap(),
            None
        );
        assert_eq!(
            mmd_loss(&empty, &a, &KernelConfig::default()).unwrap(),
            None
        );
    }

    #[test]
    fn median_heuristic_bandwidths() {
        // pooled {0, 1, 3}: distances 1, 2, 3 -> median 2
        let cfg = KernelConfig::default();
        let g = cfg.resolve(&m(2, 1, &[0.0, 1.0]), &m(1, 1, &[3.0]));
        assert_eq!(g, vec![0.5, 1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn first_sample_always_stored_and_strata_isolated() {
        let mut mem = RepresentationMemory::new(6, 1, 2, 0).unwrap();
        assert!(mem.reservoir_insert(3, &[1.0, 1.0]).unwrap());
        let before = mem.slot(3).to_vec();
        for i in 0..50 {
            mem.reservoir_insert(5, &[i as f64, 0.0]).unwrap();
        }
        assert_eq!(mem.slot(3), before.as_slice());
        assert_eq!(mem.total(), 2);
        assert!(matches!(
            mem.reservoir_insert(6, &[0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn capacity_bounds_total() {
        let mut mem = RepresentationMemory::new(3, 2, 1, 4).unwrap();
        for i in 0..30 {
            mem.reservoir_insert(i % 3, &[i as f64]).unwrap();
        }
        assert_eq!(mem.total(), 6);
        assert_eq!(mem.seen(0), 10);
    }
}
