//! End-to-end protocols over a synthetic scenario: the full lifecycle plus
//! the pseudo-label, forgetting and onboarding-order studies.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::CoordinateTable;
use crate::domain::DomainKey;
use crate::error::{Error, Result};
use crate::eval::{
    forgetting_report, mean_error, DomainStats, EvalReport, PseudoLabelStats, Snapshot,
};
use crate::incremental::{AdaptationConfig, AdaptationReport, DomainBatch, Learner, Phase};
use crate::mlvae::{Architecture, MlvaeModel};
use crate::simgen::{generate_scenario, Scenario, ScenarioConfig, SplitKind};

pub fn domain_batch(scenario: &Scenario, kind: SplitKind, key: &DomainKey) -> Result<DomainBatch> {
    let records = scenario.records(kind, key);
    if records.is_empty() {
        return Err(Error::Lookup(format!("no {} split for {key}", kind.name())));
    }
    DomainBatch::from_records(key.clone(), &records)
}

fn arch_for(scenario: &Scenario) -> Architecture {
    Architecture::standard(scenario.layout.n_aps(), scenario.layout.n_rps())
}

pub fn pretrained(scenario: &Scenario, cfg: &AdaptationConfig) -> Result<Learner> {
    let mut learner = Learner::new(arch_for(scenario), cfg.clone())?;
    let key = DomainKey::new(scenario.base_device().id.clone(), 0);
    learner.pretrain_offline(&domain_batch(scenario, SplitKind::Train, &key)?)?;
    Ok(learner)
}

/// Adapts and measures the pseudo-label error on `probe` before and after stage 1.
pub fn adapt_with_probe(
    learner: &mut Learner,
    batch: &DomainBatch,
    probe: &DomainBatch,
    coords: &CoordinateTable,
) -> Result<(AdaptationReport, PseudoLabelStats)> {
    let mut before = None;
    let mut after = None;
    let mut err = None;
    let report = learner.adapt_unsupervised_observed(batch, |phase, l| {
        let slot = match phase {
            Phase::BeforeStage1 => &mut before,
            Phase::AfterStage1 => &mut after,
            Phase::AfterStage2 => return,
        };
        match mean_error(&l.model, probe, coords) {
            Ok(v) => *slot = Some(v),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let stats = PseudoLabelStats {
        key: batch.key.clone(),
        before_stage1: before.ok_or_else(|| Error::Metric("empty adaptation batch".into()))?,
        after_stage1: after.ok_or_else(|| Error::Metric("empty adaptation batch".into()))?,
    };
    Ok((report, stats))
}

/// Everything a full lifecycle run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub learner: Learner,
    pub report: EvalReport,
}

/// Pretrain on the base device, onboard every other device at epoch 0, then
/// adapt every device at every later epoch, and evaluate all test splits.
pub fn run_pipeline(scenario: &Scenario, cfg: &AdaptationConfig) -> Result<PipelineRun> {
    let coords = scenario.coordinates();
    let roster = &scenario.config.roster;
    let base = DomainKey::new(roster[0].id.clone(), 0);
    let mut learner = pretrained(scenario, cfg)?;
    let mut timeline: Vec<(String, DomainKey, MlvaeModel)> = vec![(
        format!("pretrain {base}"),
        base.clone(),
        learner.model.clone(),
    )];
    for dev in &roster[1..] {
        let key = DomainKey::new(dev.id.clone(), 0);
        learner.onboard_device(&domain_batch(scenario, SplitKind::Onboard, &key)?)?;
        timeline.push((format!("onboard {key}"), key, learner.model.clone()));
    }
    let mut pseudo = Vec::new();
    for epoch in 1..scenario.config.n_epochs as u32 {
        for dev in roster {
            let key = DomainKey::new(dev.id.clone(), epoch);
            let batch = domain_batch(scenario, SplitKind::Adapt, &key)?;
            let probe = domain_batch(scenario, SplitKind::Test, &key)?;
            pseudo.push(adapt_with_probe(&mut learner, &batch, &probe, &coords)?.1);
        }
    }
    let tests: BTreeMap<DomainKey, DomainBatch> = scenario
        .splits
        .iter()
        .filter(|s| s.kind == SplitKind::Test)
        .map(|s| {
            Ok((
                s.key.clone(),
                domain_batch(scenario, SplitKind::Test, &s.key)?,
            ))
        })
        .collect::<Result<_>>()?;
    let snaps: Vec<Snapshot<'_>> = timeline
        .iter()
        .map(|(label, key, model)| Snapshot {
            label: label.clone(),
            introduced: key.clone(),
            model,
        })
        .collect();
    let forgetting = forgetting_report(&snaps, &tests, &coords)?;
    let domains: Vec<DomainStats> = EvalReport::evaluate(&learner.model, &tests, &coords)?;
    let report = EvalReport {
        title: format!(
            "Evaluation of {} (seed {})",
            scenario.layout.id, scenario.config.seed
        ),
        seeds: [
            ("scenario".to_string(), scenario.config.seed),
            ("model".to_string(), cfg.seed),
        ]
        .into_iter()
        .collect(),
        config: config_echo(cfg),
        domains,
        pseudo_labels: pseudo,
        forgetting: Some(forgetting),
    };
    Ok(PipelineRun { learner, report })
}

pub fn config_echo(cfg: &AdaptationConfig) -> Vec<(String, String)> {
    vec![
        ("pretrain_epochs".into(), cfg.pretrain_epochs.to_string()),
        ("onboard_epochs".into(), cfg.onboard_epochs.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("tau".into(), cfg.tau.to_string()),
        ("lr".into(), cfg.adam.lr.to_string()),
        ("memory_capacity".into(), cfg.memory_capacity.to_string()),
        ("cesa".into(), cfg.ablation.cesa.to_string()),
        ("disentangle".into(), cfg.ablation.disentangle.to_string()),
        ("stage1".into(), cfg.ablation.stage1.to_string()),
        (
            "align_path".into(),
            format!("{:?}", cfg.align_path).to_lowercase(),
        ),
    ]
}

/// Pseudo-label error before/after stage 1 for every device at `epoch`,
/// after pretraining and onboarding every device at epoch 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStudy {
    pub seed: u64,
    pub domains: Vec<PseudoLabelStats>,
    pub mean_before: f64,
    pub mean_after: f64,
}

pub fn pseudo_label_study(
    scenario_cfg: &ScenarioConfig,
    cfg: &AdaptationConfig,
    epochs: &[u32],
) -> Result<PseudoLabelStudy> {
    let scenario = generate_scenario(scenario_cfg)?;
    let coords = scenario.coordinates();
    let roster = &scenario.config.roster;
    let mut learner = pretrained(&scenario, cfg)?;
    for dev in &roster[1..] {
        let key = DomainKey::new(dev.id.clone(), 0);
        learner.onboard_device(&domain_batch(&scenario, SplitKind::Onboard, &key)?)?;
    }
    let mut domains = Vec::new();
    for &epoch in epochs {
        for dev in roster {
            let key = DomainKey::new(dev.id.clone(), epoch);
            let batch = domain_batch(&scenario, SplitKind::Adapt, &key)?;
            let probe = domain_batch(&scenario, SplitKind::Test, &key)?;
            domains.push(adapt_with_probe(&mut learner, &batch, &probe, &coords)?.1);
        }
    }
    let n = domains.len().max(1) as f64;
    Ok(PseudoLabelStudy {
        seed: scenario_cfg.seed,
        mean_before: domains.iter().map(|d| d.before_stage1).sum::<f64>() / n,
        mean_after: domains.iter().map(|d| d.after_stage1).sum::<f64>() / n,
        domains,
    })
}

/// Mean error on the base device's epoch-0 test split after pretraining and
/// after each onboarding in `order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingStudy {
    pub seed: u64,
    pub order: Vec<String>,
    pub base_error: Vec<f64>,
    /// Mean error over the epoch-0 test splits of every device seen so far.
    pub seen_error: Vec<f64>,
}

impl ForgettingStudy {
    pub fn final_base_error(&self) -> f64 {
        *self.base_error.last().expect("pretrain entry")
    }

    pub fn final_seen_error(&self) -> f64 {
        *self.seen_error.last().expect("pretrain entry")
    }
}

pub fn forgetting_study(
    scenario: &Scenario,
    cfg: &AdaptationConfig,
    order: &[String],
) -> Result<ForgettingStudy> {
    let coords = scenario.coordinates();
    let base = DomainKey::new(scenario.base_device().id.clone(), 0);
    let base_test = domain_batch(scenario, SplitKind::Test, &base)?;
    let mut learner = pretrained(scenario, cfg)?;
    let mut seen = vec![base_test.clone()];
    let mean_seen = |m: &MlvaeModel, seen: &[DomainBatch]| -> Result<f64> {
        let mut s = 0.0;
        for b in seen {
            s += mean_error(m, b, &coords)?;
        }
        Ok(s / seen.len() as f64)
    };
    let mut base_error = vec![mean_error(&learner.model, &base_test, &coords)?];
    let mut seen_error = vec![base_error[0]];
    for dev in order {
        let key = DomainKey::new(dev.clone(), 0);
        learner.onboard_device(&domain_batch(scenario, SplitKind::Onboard, &key)?)?;
        seen.push(domain_batch(scenario, SplitKind::Test, &key)?);
        base_error.push(mean_error(&learner.model, &base_test, &coords)?);
        seen_error.push(mean_seen(&learner.model, &seen)?);
    }
    Ok(ForgettingStudy {
        seed: scenario.config.seed,
        order: order.to_vec(),
        base_error,
        seen_error,
    })
}

/// `n` distinct random orderings of the non-base devices.
pub fn random_orderings(scenario: &Scenario, n: usize, seed: u64) -> Vec<Vec<String>> {
    let others: Vec<String> = scenario.config.roster[1..]
        .iter()
        .map(|d| d.id.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<String>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let mut o = others.clone();
        o.shuffle(&mut rng);
        attempts += 1;
        if !out.contains(&o) || attempts > 100 * n {
            out.push(o);
        }
    }
    out
}

pub fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
