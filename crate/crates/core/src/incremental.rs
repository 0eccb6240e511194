//! Lifecycle of a deployed model: offline pretraining, supervised onboarding
//! of unknown devices, and two-stage unsupervised adaptation for known ones.
//!
//! Adaptation runs stage 1 (classifier frozen, encoder fitted to the new
//! domain with `L_rec + L_KL`), then generates pseudo labels with the adapted
//! encoder and the frozen classifier, then stage 2 (encoder and decoder
//! frozen, classifier updated with `L_align + L_c`).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cesa::{align_step, AlignPlan, KernelConfig, RepresentationMemory};
use crate::dataio::FingerprintRecord;
use crate::error::{Error, Result};
use crate::mlvae::{Architecture, Block, DomainNoiseBuffer, MlvaeModel};
use crate::nn::{AdamConfig, AdamState, Matrix};
use crate::objective::{loss_and_grads, Batch, LossBreakdown, LossWeights, Terms};

pub use crate::domain::DomainKey;

/// Onboarding batches with fewer samples per RP than this trigger a warning.
pub const MIN_ONBOARD_PER_RP: usize = 5;

/// Mechanism switches for ablations. Each toggles exactly one mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Prototype memory and the alignment loss.
    pub cesa: bool,
    /// Per-domain buffered noise; when off, every sample draws fresh noise.
    pub disentangle: bool,
    /// Encoder adaptation before pseudo labelling.
    pub stage1: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cesa: true,
            disentangle: true,
            stage1: true,
        }
    }
}

/// Where the alignment loss sends gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignPath {
    /// Alignment is evaluated during stage 2 only. The encoder is frozen
    /// there, so the loss reaches no trainable parameter and is just reported.
    Monitor,
    /// Alignment also enters stage 1, pulling the class latents of the new
    /// domain toward the stored prototypes. Stage 2 still reports it.
    Stage1,
    /// As `Stage1`, and onboarding aligns too.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub pretrain_epochs: usize,
    pub onboard_epochs: usize,
    /// Epochs for each adaptation stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Pseudo labels whose confidence is below this are discarded.
    pub tau: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub kernel: KernelConfig,
    /// Prototypes kept per RP.
    pub memory_capacity: usize,
    pub ablation: Ablation,
    pub align_path: AlignPath,
    /// Also update the decoder in stage 1.
    pub stage1_trains_decoder: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            onboard_epochs: 50,
            epochs: 50,
            batch_size: 32,
            weights: LossWeights::default(),
            tau: 0.0,
            seed: 0,
            adam: AdamConfig::default(),
            kernel: KernelConfig::default(),
            memory_capacity: 1,
            ablation: Ablation::default(),
            align_path: AlignPath::Stage1,
            stage1_trains_decoder: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pretrain_epochs == 0 || self.onboard_epochs == 0 {
            return Err(Error::Input("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Input(format!(
                "tau must be in [0, 1], got {}",
                self.tau
            )));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Input("memory capacity must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Pretrain,
    Onboard,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub key: DomainKey,
    pub kind: EventKind,
}

/// Known devices and the append-only event history.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DomainRegistry {
    known: BTreeSet<String>,
    history: Vec<LifecycleEvent>,
}

impl DomainRegistry {
    pub fn is_known(&self, device: &str) -> bool {
        self.known.contains(device)
    }

    pub fn known(&self) -> &BTreeSet<String> {
        &self.known
    }

    pub fn history(&self) -> &[LifecycleEvent] {
        &self.history
    }

    fn record(&mut self, key: DomainKey, kind: EventKind) {
        if matches!(kind, EventKind::Pretrain | EventKind::Onboard) {
            self.known.insert(key.device.clone());
        }
        self.history.push(LifecycleEvent { key, kind });
    }
}

/// Standardized fingerprints of exactly one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub key: DomainKey,
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl DomainBatch {
    /// Fails if records come from different domains or mix labelled and
    /// unlabelled samples.
    pub fn from_records(key: DomainKey, records: &[&FingerprintRecord]) -> Result<Self> {
        if let Some(r) = records
            .iter()
            .find(|r| r.device != key.device || r.epoch != key.epoch)
        {
            return Err(Error::Input(format!(
                "sample {} belongs to {} not {key}",
                r.sample_id,
                r.key()
            )));
        }
        let rows = records
            .iter()
            .map(|r| r.standardized())
            .collect::<Result<Vec<_>>>()?;
        let x = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        let labelled = records.iter().filter(|r| r.rp.is_some()).count();
        let labels = if labelled == records.len() && !records.is_empty() {
            Some(records.iter().map(|r| r.rp.expect("checked")).collect())
        } else if labelled == 0 {
            None
        } else {
            return Err(Error::Input(format!(
                "{key}: {labelled} of {} samples labelled",
                records.len()
            )));
        };
        Ok(Self { key, x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Per-epoch means of each loss term.
pub type TrainingCurve = Vec<LossBreakdown>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub key: DomainKey,
    pub curve: TrainingCurve,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnboardReport {
    pub key: DomainKey,
    pub curve: TrainingCurve,
    pub train_accuracy: f64,
    pub prototypes_stored: usize,
    pub min_samples_per_rp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub align: Option<f64>,
    pub class: f64,
    pub classifier_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDrift {
    pub encoder: f64,
    pub decoder: f64,
    pub classifier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub key: DomainKey,
    pub samples: usize,
    pub stage1_curve: TrainingCurve,
    pub stage2_curve: Vec<Stage2Epoch>,
    pub pseudo_labels: usize,
    pub rejected_fraction: f64,
    /// Pseudo labels that differ from what the pre-stage-1 model predicted.
    pub relabelled: usize,
    /// `L_rec + L_KL` (last stage-1 epoch) plus `L_align + L_c` (last stage-2 epoch).
    pub total_loss: f64,
    /// L∞ parameter change per block over the whole adaptation.
    pub drift: BlockDrift,
    pub classifier_frozen_in_stage1: bool,
    pub encoder_decoder_frozen_in_stage2: bool,
}

impl AdaptationReport {
    fn empty(key: DomainKey) -> Self {
        Self {
            key,
            samples: 0,
            stage1_curve: Vec::new(),
            stage2_curve: Vec::new(),
            pseudo_labels: 0,
            rejected_fraction: 0.0,
            relabelled: 0,
            total_loss: 0.0,
            drift: BlockDrift {
                encoder: 0.0,
                decoder: 0.0,
                classifier: 0.0,
            },
            classifier_frozen_in_stage1: true,
            encoder_decoder_frozen_in_stage2: true,
        }
    }
}

/// Points in an adaptation run at which an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BeforeStage1,
    AfterStage1,
    AfterStage2,
}

/// Domains whose data each public call received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEntry {
    pub call: String,
    pub keys: BTreeSet<DomainKey>,
}

/// Argmax of the classifier on the class latents; `None` below `tau`.
pub fn pseudo_label(model: &MlvaeModel, x: &Matrix, tau: f64) -> Result<Vec<Option<(usize, f64)>>> {
    let probs = model.classify(&model.encode_class(x)?)?;
    Ok(probs
        .iter_rows()
        .map(|row| {
            let (arg, &p) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            (p >= tau).then_some((arg, p))
        })
        .collect())
}

pub fn predict(model: &MlvaeModel, x: &Matrix) -> Result<Vec<usize>> {
    Ok(pseudo_label(model, x, 0.0)?
        .into_iter()
        .map(|p| p.expect("tau 0 accepts all").0)
        .collect())
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Model plus everything that must persist between lifecycle calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub model: MlvaeModel,
    pub noise: DomainNoiseBuffer,
    pub memory: RepresentationMemory,
    pub registry: DomainRegistry,
    pub config: AdaptationConfig,
    rng: ChaCha8Rng,
    access_log: Vec<AccessEntry>,
}

impl Learner {
    pub fn new(arch: Architecture, config: AdaptationConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MlvaeModel::new(arch, &mut init)?;
        let latent = model.latent_dim();
        let noise = DomainNoiseBuffer::new(latent, config.seed ^ 0x006e_6f69_7365);
        let memory = RepresentationMemory::new(
            model.n_rps(),
            config.memory_capacity,
            latent,
            config.seed ^ 0x6d65_6d6f_7279,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7368_7566);
        Ok(Self {
            model,
            noise,
            memory,
            registry: DomainRegistry::default(),
            config,
            rng,
            access_log: Vec::new(),
        })
    }

    pub fn access_log(&self) -> &[AccessEntry] {
        &self.access_log
    }

    fn log_access(&mut self, call: &str, batch: &DomainBatch) {
        self.access_log.push(AccessEntry {
            call: call.to_string(),
            keys: [batch.key.clone()].into_iter().collect(),
        });
    }

    fn check_width(&self, batch: &DomainBatch) -> Result<()> {
        if !batch.is_empty() && batch.x.cols() != self.model.input_dim() {
            return Err(Error::Shape {
                op: "lifecycle input",
                left: batch.x.shape(),
                right: (batch.x.rows(), self.model.input_dim()),
            });
        }
        Ok(())
    }

    fn align_in_stage1(&self) -> bool {
        self.config.ablation.cesa && self.config.align_path != AlignPath::Monitor
    }

    fn align_in_onboarding(&self) -> bool {
        self.config.ablation.cesa && self.config.align_path == AlignPath::Encoder
    }

    fn noise_rows(&mut self, key: &DomainKey, n: usize) -> Matrix {
        if self.config.ablation.disentangle {
            self.noise.batch_noise(key, n)
        } else {
            let d = self.model.latent_dim();
            let v = (0..n * d)
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect();
            Matrix::from_vec(n, d, v).expect("sized")
        }
    }

    /// Minibatch training of `trainable` blocks; returns per-epoch means.
    fn train_phase(
        &mut self,
        batch: &DomainBatch,
        labels: Option<&[usize]>,
        epochs: usize,
        mut terms: Terms,
        trainable: &[Block],
    ) -> Result<TrainingCurve> {
        let n = batch.len();
        let use_align = terms.align && self.memory.total() > 0;
        terms.align = use_align;
        let mut optims: Vec<(Block, AdamState)> = trainable
            .iter()
            .map(|&b| {
                (
                    b,
                    AdamState::new(self.config.adam, self.model.block_layout(b)),
                )
            })
            .collect();
        let bs = self.config.batch_size;
        let mut curve = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut acc = LossBreakdown::default();
            let (mut align_sum, mut class_sum) = (0.0, 0.0);
            let (mut has_align, mut has_class) = (false, false);
            for chunk in order.chunks(bs) {
                let x = batch.x.select_rows(chunk);
                let eps = self.noise_rows(&batch.key, chunk.len());
                let lab: Option<Vec<usize>> = labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
                let plan = if use_align {
                    let z_c = self.model.encode_class(&x)?;
                    AlignPlan::new(&z_c, &self.memory, lab.as_deref(), &self.config.kernel)?
                } else {
                    None
                };
                let b = Batch {
                    x: &x,
                    eps: &eps,
                    labels: lab.as_deref(),
                    align: plan.as_ref(),
                };
                let (loss, grads) = loss_and_grads(&self.model, &b, terms, &self.config.weights)?;
                for (block, adam) in optims.iter_mut() {
                    let g = grads.blocks(*block);
                    adam.step(&mut self.model.blocks_mut(*block), &g)?;
                }
                let w = chunk.len() as f64 / n as f64;
                acc.rec += w * loss.rec;
                acc.kl += w * loss.kl;
                acc.total += w * loss.total;
                if let Some(a) = loss.align {
                    align_sum += w * a;
                    has_align = true;
                }
                if let Some(c) = loss.class {
                    class_sum += w * c;
                    has_class = true;
                }
            }
            acc.align = has_align.then_some(align_sum);
            acc.class = has_class.then_some(class_sum);
            if !acc.total.is_finite() {
                return Err(Error::Training {
                    block: format!("{trainable:?}"),
                    reason: format!("non-finite loss on {}", batch.key),
                });
            }
            curve.push(acc);
        }
        Ok(curve)
    }

    fn fill_memory(&mut self, batch: &DomainBatch) -> Result<usize> {
        if !self.config.ablation.cesa {
            return Ok(0);
        }
        let labels = batch.labels.as_ref().expect("labelled batch");
        let z_c = self.model.encode_class(&batch.x)?;
        let mut stored = 0;
        for (i, &rp) in labels.iter().enumerate() {
            if self.memory.reservoir_insert(rp, z_c.row(i))? {
                stored += 1;
            }
        }
        Ok(stored)
    }

    fn require_labels<'a>(&self, batch: &'a DomainBatch, what: &str) -> Result<&'a [usize]> {
        let labels = batch.labels.as_deref().ok_or_else(|| {
            Error::Input(format!("{what} needs labelled samples ({})", batch.key))
        })?;
        if let Some(&l) = labels.iter().find(|&&l| l >= self.model.n_rps()) {
            return Err(Error::Input(format!("label {l} out of range")));
        }
        Ok(labels)
    }

    /// Supervised training of all blocks on the offline dataset. The device
    /// becomes known and its class latents seed the prototype memory.
    pub fn pretrain_offline(&mut self, batch: &DomainBatch) -> Result<PretrainReport> {
        self.log_access("pretrain_offline", batch);
        self.check_width(batch)?;
        if batch.is_empty() {
            return Err(Error::Input("empty pretraining set".into()));
        }
        let labels = self.require_labels(batch, "pretraining")?.to_vec();
        if batch.key.epoch != 0 {
            return Err(Error::Precondition(format!(
                "pretraining data must come from epoch 0, got {}",
                batch.key
            )));
        }
        if !self.registry.history().is_empty() {
            return Err(Error::Precondition("model is already pretrained".into()));
        }
        let curve = self.train_phase(
            batch,
            Some(&labels),
            self.config.pretrain_epochs,
            Terms::SUPERVISED,
            &Block::ALL,
        )?;
        self.fill_memory(batch)?;
        self.registry.record(batch.key.clone(), EventKind::Pretrain);
        let acc = accuracy(&predict(&self.model, &batch.x)?, &labels);
        Ok(PretrainReport {
            key: batch.key.clone(),
            curve,
            train_accuracy: acc,
        })
    }

    /// Supervised fine-tuning for a device seen for the first time.
    pub fn onboard_device(&mut self, batch: &DomainBatch) -> Result<OnboardReport> {
        self.log_access("onboard_device", batch);
        self.check_width(batch)?;
        if self.registry.is_known(&batch.key.device) {
            return Err(Error::Precondition(format!(
                "device {} is already known; use adapt_unsupervised",
                batch.key.device
            )));
        }
        if batch.is_empty() {
            return Err(Error::Input(format!(
                "empty onboarding batch for {}",
                batch.key
            )));
        }
        let labels = self.require_labels(batch, "onboarding")?.to_vec();
        let mut per_rp = vec![0usize; self.model.n_rps()];
        for &l in &labels {
            per_rp[l] += 1;
        }
        let min = per_rp.iter().copied().min().unwrap_or(0);
        if min == 0 {
            let missing: Vec<usize> = (0..per_rp.len()).filter(|&i| per_rp[i] == 0).collect();
            return Err(Error::Input(format!(
                "onboarding {} lacks samples for RPs {missing:?}",
                batch.key
            )));
        }
        if min < MIN_ONBOARD_PER_RP {
            log::warn!(
                "onboarding {} with only {min} samples for some RP (recommended ≥ {MIN_ONBOARD_PER_RP})",
                batch.key
            );
        }
        let terms = Terms {
            align: self.align_in_onboarding(),
            ..Terms::SUPERVISED
        };
        let curve = self.train_phase(
            batch,
            Some(&labels),
            self.config.onboard_epochs,
            terms,
            &Block::ALL,
        )?;
        self.noise.get_or_create(&batch.key);
        let stored = self.fill_memory(batch)?;
        self.registry.record(batch.key.clone(), EventKind::Onboard);
        let acc = accuracy(&predict(&self.model, &batch.x)?, &labels);
        Ok(OnboardReport {
            key: batch.key.clone(),
            curve,
            train_accuracy: acc,
            prototypes_stored: stored,
            min_samples_per_rp: min,
        })
    }

    pub fn adapt_unsupervised(&mut self, batch: &DomainBatch) -> Result<AdaptationReport> {
        self.adapt_unsupervised_observed(batch, |_, _| {})
    }

    /// As [`Self::adapt_unsupervised`], calling `observe` before stage 1,
    /// between the stages, and after stage 2.
    pub fn adapt_unsupervised_observed(
        &mut self,
        batch: &DomainBatch,
        mut observe: impl FnMut(Phase, &Learner),
    ) -> Result<AdaptationReport> {
        self.log_access("adapt_unsupervised", batch);
        self.check_width(batch)?;
        if !self.registry.is_known(&batch.key.device) {
            return Err(Error::Precondition(format!(
                "device {} is unknown; onboard it with labelled data first",
                batch.key.device
            )));
        }
        if batch.is_empty() {
            log::warn!("adaptation batch for {} is empty; nothing to do", batch.key);
            return Ok(AdaptationReport::empty(batch.key.clone()));
        }
        let start = self.model.clone();
        let before = predict(&self.model, &batch.x)?;
        observe(Phase::BeforeStage1, self);

        // stage 1: classifier frozen
        let cls_sum = self.model.checksum(Block::Classifier);
        let stage1_curve = if self.config.ablation.stage1 {
            let trainable: &[Block] = if self.config.stage1_trains_decoder {
                &[Block::Encoder, Block::Decoder]
            } else {
                &[Block::Encoder]
            };
            let terms = Terms {
                align: self.align_in_stage1(),
                ..Terms::VAE
            };
            self.train_phase(batch, None, self.config.epochs, terms, trainable)?
        } else {
            Vec::new()
        };
        self.noise.get_or_create(&batch.key);
        let classifier_frozen = self.model.checksum(Block::Classifier) == cls_sum;
        if !classifier_frozen {
            return Err(Error::Training {
                block: "classifier".into(),
                reason: "changed during stage 1".into(),
            });
        }
        observe(Phase::AfterStage1, self);

        // pseudo labels from the adapted encoder and the frozen classifier
        let labels = pseudo_label(&self.model, &batch.x, self.config.tau)?;
        let kept: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let pseudo: Vec<usize> = kept.iter().map(|&i| labels[i].expect("kept").0).collect();
        let relabelled = kept
            .iter()
            .zip(&pseudo)
            .filter(|(&i, &p)| before[i] != p)
            .count();
        let rejected = 1.0 - kept.len() as f64 / labels.len() as f64;

        // stage 2: encoder and decoder frozen
        let enc_sum = self.model.checksum(Block::Encoder);
        let dec_sum = self.model.checksum(Block::Decoder);
        let mut stage2_curve = Vec::new();
        if !kept.is_empty() {
            let x = batch.x.select_rows(&kept);
            let mut adam =
                AdamState::new(self.config.adam, self.model.block_layout(Block::Classifier));
            let mut order: Vec<usize> = (0..kept.len()).collect();
            let memory = self.config.ablation.cesa.then_some(&self.memory);
            for _ in 0..self.config.epochs {
                order.shuffle(&mut self.rng);
                let mut ep = Stage2Epoch {
                    align: None,
                    class: 0.0,
                    classifier_grad_norm: 0.0,
                };
                let mut align_sum = 0.0;
                for chunk in order.chunks(self.config.batch_size) {
                    let xb = x.select_rows(chunk);
                    let lb: Vec<usize> = chunk.iter().map(|&i| pseudo[i]).collect();
                    let r = align_step(
                        &mut self.model,
                        &xb,
                        &lb,
                        memory.filter(|m| m.total() > 0),
                        &self.config.kernel,
                        self.config.weights.class,
                        &mut adam,
                    )?;
                    let w = chunk.len() as f64 / kept.len() as f64;
                    ep.class += w * r.class_loss;
                    ep.classifier_grad_norm = ep.classifier_grad_norm.max(r.classifier_grad_norm);
                    if let Some(a) = r.align_loss {
                        align_sum += w * a;
                        ep.align = Some(align_sum);
                    }
                }
                stage2_curve.push(ep);
            }
        }
        let frozen2 = self.model.checksum(Block::Encoder) == enc_sum
            && self.model.checksum(Block::Decoder) == dec_sum;
        if !frozen2 {
            return Err(Error::Training {
                block: "encoder/decoder".into(),
                reason: "changed during stage 2".into(),
            });
        }
        observe(Phase::AfterStage2, self);

        let w = &self.config.weights;
        let s1 = stage1_curve
            .last()
            .map_or(0.0, |l| w.rec * l.rec + w.kl * l.kl);
        let s2 = stage2_curve.last().map_or(0.0, |e| {
            w.align * e.align.unwrap_or(0.0) + w.class * e.class
        });
        self.registry.record(batch.key.clone(), EventKind::Adapt);
        Ok(AdaptationReport {
            key: batch.key.clone(),
            samples: batch.len(),
            stage1_curve,
            stage2_curve,
            pseudo_labels: kept.len(),
            rejected_fraction: rejected,
            relabelled,
            total_loss: s1 + s2,
            drift: BlockDrift {
                encoder: self.model.max_abs_diff(&start, Block::Encoder),
                decoder: self.model.max_abs_diff(&start, Block::Decoder),
                classifier: self.model.max_abs_diff(&start, Block::Classifier),
            },
            classifier_frozen_in_stage1: classifier_frozen,
            encoder_decoder_frozen_in_stage2: frozen2,
        })
    }

    /// Pseudo label for a single standardized fingerprint of a known device.
    pub fn pseudo_label(&mut self, x: &[f64], key: &DomainKey) -> Result<Option<(usize, f64)>> {
        if !self.registry.is_known(&key.device) {
            return Err(Error::Precondition(format!(
                "device {} is unknown",
                key.device
            )));
        }
        self.noise.get_or_create(key);
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(pseudo_label(&self.model, &m, self.config.tau)?[0])
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        predict(&self.model, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_scenario, Preset, ScenarioConfig, SplitKind};

    fn quick() -> AdaptationConfig {
        AdaptationConfig {
            pretrain_epochs: 15,
            onboard_epochs: 5,
            epochs: 3,
            ..AdaptationConfig::default()
        }
    }

    fn batch(sc: &crate::simgen::Scenario, kind: SplitKind, dev: &str, epoch: u32) -> DomainBatch {
        let key = DomainKey::new(dev, epoch);
        DomainBatch::from_records(key.clone(), &sc.records(kind, &key)).unwrap()
    }

    fn setup() -> (crate::simgen::Scenario, Learner) {
        let sc =
            generate_scenario(&ScenarioConfig::new(3, Preset::Toy).with_samples_per_rp(3)).unwrap();
        let arch = Architecture::standard(sc.layout.n_aps(), sc.layout.n_rps());
        let mut l = Learner::new(arch, quick()).unwrap();
        l.pretrain_offline(&batch(&sc, SplitKind::Train, "BLU", 0))
            .unwrap();
        (sc, l)
    }

    #[test]
    fn config_validation() {
        assert!(AdaptationConfig {
            epochs: 0,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(AdaptationConfig {
            batch_size: 0,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(AdaptationConfig {
            tau: 1.5,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(quick().validate().is_ok());
    }

    #[test]
    fn pretrain_rejects_unlabelled_and_later_epochs() {
        let sc =
            generate_scenario(&ScenarioConfig::new(3, Preset::Toy).with_samples_per_rp(2)).unwrap();
        let arch = Architecture::standard(sc.layout.n_aps(), sc.layout.n_rps());
        let mut l = Learner::new(arch, quick()).unwrap();
        let unlabelled = batch(&sc, SplitKind::Adapt, "BLU", 0);
        assert!(matches!(
            l.pretrain_offline(&unlabelled),
            Err(Error::Input(_))
        ));
        let later = batch(&sc, SplitKind::Test, "BLU", 2);
        assert!(matches!(
            l.pretrain_offline(&later),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn mixed_domains_are_rejected() {
        let sc =
            generate_scenario(&ScenarioConfig::new(3, Preset::Toy).with_samples_per_rp(1)).unwrap();
        let mut recs = sc.records(SplitKind::Test, &DomainKey::new("BLU", 0));
        recs.extend(sc.records(SplitKind::Test, &DomainKey::new("HTC", 0)));
        assert!(DomainBatch::from_records(DomainKey::new("BLU", 0), &recs).is_err());
    }

    #[test]
    fn registry_contract() {
        let (sc, mut l) = setup();
        assert!(l.registry.is_known("BLU"));
        let unknown = batch(&sc, SplitKind::Adapt, "HTC", 1);
        assert!(matches!(
            l.adapt_unsupervised(&unknown),
            Err(Error::Precondition(_))
        ));
        let onboard = batch(&sc, SplitKind::Onboard, "HTC", 0);
        let r = l.onboard_device(&onboard).unwrap();
        assert_eq!(r.min_samples_per_rp, 3);
        assert!(l.registry.is_known("HTC"));
        assert!(l.noise.contains(&onboard.key));
        assert!(matches!(
            l.onboard_device(&onboard),
            Err(Error::Precondition(_))
        ));
        let kinds: Vec<EventKind> = l.registry.history().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::Pretrain, EventKind::Onboard]);
    }

    #[test]
    fn onboarding_needs_every_rp() {
        let (sc, mut l) = setup();
        let key = DomainKey::new("S7", 0);
        let recs: Vec<_> = sc
            .records(SplitKind::Onboard, &key)
            .into_iter()
            .filter(|r| r.rp != Some(0))
            .collect();
        let b = DomainBatch::from_records(key, &recs).unwrap();
        assert!(matches!(l.onboard_device(&b), Err(Error::Input(_))));
        assert!(!l.registry.is_known("S7"));
    }

    #[test]
    fn memory_covers_every_rp_after_onboarding() {
        let (sc, mut l) = setup();
        l.onboard_device(&batch(&sc, SplitKind::Onboard, "LG", 0))
            .unwrap();
        assert_eq!(l.memory.covered_rps(), sc.layout.n_rps());
        assert_eq!(l.memory.total(), sc.layout.n_rps());
    }

    #[test]
    fn empty_adaptation_is_a_no_op() {
        let (_, mut l) = setup();
        let before = l.clone();
        let empty = DomainBatch::from_records(DomainKey::new("BLU", 1), &[]).unwrap();
        let r = l.adapt_unsupervised(&empty).unwrap();
        assert_eq!(r.samples, 0);
        assert_eq!(l.model, before.model);
        assert_eq!(l.registry, before.registry);
    }

    #[test]
    fn stages_freeze_the_right_blocks() {
        let (sc, mut l) = setup();
        let mut sums = Vec::new();
        let b = batch(&sc, SplitKind::Adapt, "BLU", 4);
        let r = l
            .adapt_unsupervised_observed(&b, |p, l| {
                sums.push((p, Block::ALL.map(|blk| l.model.checksum(blk))));
            })
            .unwrap();
        assert_eq!(sums.len(), 3);
        let [s0, s1, s2] = [sums[0].1, sums[1].1, sums[2].1];
        assert_eq!(s0[2], s1[2], "classifier changed in stage 1");
        assert_ne!(s0[0], s1[0], "encoder did not train in stage 1");
        assert_eq!(s0[1], s1[1], "decoder trains only when configured");
        assert_eq!(
            (s1[0], s1[1]),
            (s2[0], s2[1]),
            "encoder/decoder changed in stage 2"
        );
        assert_ne!(s1[2], s2[2]);
        assert!(r.classifier_frozen_in_stage1 && r.encoder_decoder_frozen_in_stage2);
        assert_eq!(r.stage1_curve.len(), 3);
        assert_eq!(r.stage2_curve.len(), 3);
        assert_eq!(r.pseudo_labels, b.len());
        assert_eq!(r.rejected_fraction, 0.0);
        assert!(r.total_loss.is_finite());
    }

    #[test]
    fn tau_thresholds() {
        let (sc, mut l) = setup();
        let b = batch(&sc, SplitKind::Test, "BLU", 0);
        assert!(pseudo_label(&l.model, &b.x, 0.0)
            .unwrap()
            .iter()
            .all(Option::is_some));
        assert!(pseudo_label(&l.model, &b.x, 1.0)
            .unwrap()
            .iter()
            .all(Option::is_none));
        l.config.tau = 1.0;
        let a = batch(&sc, SplitKind::Adapt, "BLU", 1);
        let r = l.adapt_unsupervised(&a).unwrap();
        assert_eq!((r.pseudo_labels, r.rejected_fraction), (0, 1.0));
        assert!(r.stage2_curve.is_empty());
    }

    #[test]
    fn one_hot_classifier_gives_full_confidence() {
        let (sc, mut l) = setup();
        let last = l.model.classifier.layers_mut().last_mut().unwrap();
        let [w, b] = last.blocks_mut();
        w.fill(0.0);
        b.fill(0.0);
        b[7] = 100.0;
        let x = batch(&sc, SplitKind::Test, "BLU", 0).x;
        let key = DomainKey::new("BLU", 0);
        assert_eq!(l.pseudo_label(x.row(0), &key).unwrap(), Some((7, 1.0)));
        assert!(l.pseudo_label(x.row(0), &DomainKey::new("OP3", 0)).is_err());
    }

    #[test]
    fn access_log_names_only_the_given_domain() {
        let (sc, mut l) = setup();
        l.onboard_device(&batch(&sc, SplitKind::Onboard, "MOTO", 0))
            .unwrap();
        l.adapt_unsupervised(&batch(&sc, SplitKind::Adapt, "MOTO", 2))
            .unwrap();
        let log = l.access_log();
        assert_eq!(log.len(), 3);
        for (entry, expect) in log.iter().zip([("BLU", 0), ("MOTO", 0), ("MOTO", 2)]) {
            let keys: Vec<_> = entry.keys.iter().cloned().collect();
            assert_eq!(keys, vec![DomainKey::new(expect.0, expect.1)]);
        }
    }

    #[test]
    fn lifecycle_is_bit_reproducible() {
        let run = || {
            let (sc, mut l) = setup();
            l.onboard_device(&batch(&sc, SplitKind::Onboard, "HTC", 0))
                .unwrap();
            l.adapt_unsupervised(&batch(&sc, SplitKind::Adapt, "HTC", 3))
                .unwrap();
            l
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.flat_params(), b.model.flat_params());
        assert_eq!(a, b);
    }
}
