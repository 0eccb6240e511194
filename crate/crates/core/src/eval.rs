//! Localization metrics and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::CoordinateTable;
use crate::domain::DomainKey;
use crate::error::{Error, Result};
use crate::incremental::{predict, DomainBatch};
use crate::mlvae::MlvaeModel;

/// Distance in meters between the coordinates of two RPs.
pub fn euclidean_error(pred: usize, truth: usize, coords: &CoordinateTable) -> Result<f64> {
    let (p, t) = (coords.get(pred)?, coords.get(truth)?);
    Ok(p.iter()
        .zip(&t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn errors(pred: &[usize], truth: &[usize], coords: &CoordinateTable) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    pred.iter()
        .zip(truth)
        .map(|(&p, &t)| euclidean_error(p, t, coords))
        .collect()
}

/// Summary of a set of per-sample errors. Percentiles use the nearest rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_errors(errs: &[f64]) -> Result<Self> {
        if errs.is_empty() {
            return Err(Error::Metric("no samples to summarize".into()));
        }
        if let Some(e) = errs.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::Metric(format!("invalid distance {e}")));
        }
        let mut s = errs.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Ok(Self {
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: rank(0.5),
            p90: rank(0.9),
            max: s[s.len() - 1],
        })
    }
}

fn labels_of(probe: &DomainBatch) -> Result<&[usize]> {
    probe
        .labels
        .as_deref()
        .ok_or_else(|| Error::Metric(format!("probe set {} is unlabelled", probe.key)))
}

/// Per-sample errors of `model` on a labelled batch.
pub fn batch_errors(
    model: &MlvaeModel,
    probe: &DomainBatch,
    coords: &CoordinateTable,
) -> Result<Vec<f64>> {
    let truth = labels_of(probe)?;
    if probe.is_empty() {
        return Err(Error::Metric(format!("empty probe set {}", probe.key)));
    }
    errors(&predict(model, &probe.x)?, truth, coords)
}

pub fn mean_error(
    model: &MlvaeModel,
    probe: &DomainBatch,
    coords: &CoordinateTable,
) -> Result<f64> {
    Ok(ErrorStats::from_errors(&batch_errors(model, probe, coords)?)?.mean)
}

/// Mean distance between pseudo-labelled and true RPs over a held-out probe
/// set, for the model state at whichever pipeline point it is called.
pub fn pseudo_label_error(
    model: &MlvaeModel,
    probe: &DomainBatch,
    coords: &CoordinateTable,
) -> Result<f64> {
    mean_error(model, probe, coords)
}

/// `cells[e][d]` is the mean error on `domains[d]` using the model after
/// `events[e]`, present only for domains introduced at or before `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub events: Vec<String>,
    pub domains: Vec<DomainKey>,
    pub cells: Vec<Vec<Option<f64>>>,
}

/// One lifecycle snapshot: a label, the domain it introduced, and the model after it.
pub struct Snapshot<'a> {
    pub label: String,
    pub introduced: DomainKey,
    pub model: &'a MlvaeModel,
}

pub fn forgetting_report(
    timeline: &[Snapshot<'_>],
    tests: &BTreeMap<DomainKey, DomainBatch>,
    coords: &CoordinateTable,
) -> Result<ForgettingMatrix> {
    if timeline.is_empty() {
        return Err(Error::Metric(
            "forgetting report needs at least one checkpoint".into(),
        ));
    }
    let mut domains: Vec<DomainKey> = Vec::new();
    for s in timeline {
        if !domains.contains(&s.introduced) {
            domains.push(s.introduced.clone());
        }
    }
    for d in &domains {
        if !tests.contains_key(d) {
            return Err(Error::Metric(format!("no test split for {d}")));
        }
    }
    let mut cells = Vec::with_capacity(timeline.len());
    let mut seen = BTreeSet::new();
    for s in timeline {
        seen.insert(s.introduced.clone());
        let row = domains
            .iter()
            .map(|d| {
                seen.contains(d)
                    .then(|| mean_error(s.model, &tests[d], coords))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok(ForgettingMatrix {
        events: timeline.iter().map(|s| s.label.clone()).collect(),
        domains,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub key: DomainKey,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub key: DomainKey,
    pub before_stage1: f64,
    pub after_stage1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub seeds: BTreeMap<String, u64>,
    /// Configuration echo as `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub domains: Vec<DomainStats>,
    pub pseudo_labels: Vec<PseudoLabelStats>,
    pub forgetting: Option<ForgettingMatrix>,
}

impl EvalReport {
    pub fn evaluate(
        model: &MlvaeModel,
        tests: &BTreeMap<DomainKey, DomainBatch>,
        coords: &CoordinateTable,
    ) -> Result<Vec<DomainStats>> {
        tests
            .iter()
            .map(|(k, b)| {
                Ok(DomainStats {
                    key: k.clone(),
                    stats: ErrorStats::from_errors(&batch_errors(model, b, coords)?)?,
                })
            })
            .collect()
    }

    /// Error over every test sample pooled.
    pub fn overall(&self) -> Option<ErrorStats> {
        let n: usize = self.domains.iter().map(|d| d.stats.n).sum();
        if n == 0 {
            return None;
        }
        let mean = self
            .domains
            .iter()
            .map(|d| d.stats.mean * d.stats.n as f64)
            .sum::<f64>()
            / n as f64;
        let max = self.domains.iter().map(|d| d.stats.max).fold(0.0, f64::max);
        Some(ErrorStats {
            n,
            mean,
            median: f64::NAN,
            p90: f64::NAN,
            max,
        })
    }

    /// Device × epoch grid of mean errors; missing cells are `None`.
    pub fn heatmap(&self) -> (Vec<String>, Vec<u32>, Vec<Vec<Option<f64>>>) {
        let devices: Vec<String> = self
            .domains
            .iter()
            .map(|d| d.key.device.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let epochs: Vec<u32> = self
            .domains
            .iter()
            .map(|d| d.key.epoch)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let grid = devices
            .iter()
            .map(|dev| {
                epochs
                    .iter()
                    .map(|&ep| {
                        self.domains
                            .iter()
                            .find(|d| &d.key.device == dev && d.key.epoch == ep)
                            .map(|d| d.stats.mean)
                    })
                    .collect()
            })
            .collect();
        (devices, epochs, grid)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "{}", "=".repeat(self.title.chars().count()));
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "seed.{k} = {v}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "\nLocalization error (m)");
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
            "device", "epoch", "n", "mean", "median", "p90", "max"
        );
        for d in &self.domains {
            let s = &d.stats;
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                d.key.device, d.key.epoch, s.n, s.mean, s.median, s.p90, s.max
            );
        }
        if let Some(o) = self.overall() {
            let _ = writeln!(
                out,
                "overall: n = {}, mean = {:.4} m, worst = {:.4} m",
                o.n, o.mean, o.max
            );
        }
        let (devices, epochs, grid) = self.heatmap();
        if !grid.is_empty() {
            let _ = writeln!(out, "\nMean error heatmap (rows: device, columns: epoch)");
            let _ = write!(out, "{:<10}", "");
            for e in &epochs {
                let _ = write!(out, " {e:>8}");
            }
            out.push('\n');
            for (dev, row) in devices.iter().zip(&grid) {
                let _ = write!(out, "{dev:<10}");
                for c in row {
                    match c {
                        Some(v) => {
                            let _ = write!(out, " {v:>8.3}");
                        }
                        None => {
                            let _ = write!(out, " {:>8}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        if !self.pseudo_labels.is_empty() {
            let _ = writeln!(out, "\nPseudo-label error (m)");
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>9} {:>9}",
                "device", "epoch", "before", "after"
            );
            for p in &self.pseudo_labels {
                let _ = writeln!(
                    out,
                    "{:<10} {:>5} {:>9.4} {:>9.4}",
                    p.key.device, p.key.epoch, p.before_stage1, p.after_stage1
                );
            }
        }
        if let Some(f) = &self.forgetting {
            let _ = writeln!(out, "\nForgetting (mean error after each event)");
            let _ = write!(out, "{:<22}", "event");
            for d in &f.domains {
                let _ = write!(out, " {:>12}", d.to_string());
            }
            out.push('\n');
            for (ev, row) in f.events.iter().zip(&f.cells) {
                let _ = write!(out, "{ev:<22}");
                for c in row {
                    match c {
                        Some(v) => {
                            let _ = write!(out, " {v:>12.4}");
                        }
                        None => {
                            let _ = write!(out, " {:>12}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Tab-separated tables, each introduced by a `# table <name>` line.
    pub fn render_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("# table domains\ndevice\tepoch\tn\tmean\tmedian\tp90\tmax\n");
        for d in &self.domains {
            let s = &d.stats;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                d.key.device, d.key.epoch, s.n, s.mean, s.median, s.p90, s.max
            );
        }
        let (devices, epochs, grid) = self.heatmap();
        out.push_str("\n# table heatmap\ndevice");
        for e in &epochs {
            let _ = write!(out, "\t{e}");
        }
        out.push('\n');
        for (dev, row) in devices.iter().zip(&grid) {
            out.push_str(dev);
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(out, "\t{v:.6}");
                    }
                    None => out.push_str("\tNA"),
                }
            }
            out.push('\n');
        }
        if !self.pseudo_labels.is_empty() {
            out.push_str("\n# table pseudo_labels\ndevice\tepoch\tbefore\tafter\n");
            for p in &self.pseudo_labels {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{:.6}",
                    p.key.device, p.key.epoch, p.before_stage1, p.after_stage1
                );
            }
        }
        if let Some(f) = &self.forgetting {
            out.push_str("\n# table forgetting\nevent");
            for d in &f.domains {
                let _ = write!(out, "\t{d}");
            }
            out.push('\n');
            for (ev, row) in f.events.iter().zip(&f.cells) {
                out.push_str(ev);
                for c in row {
                    match c {
                        Some(v) => {
                            let _ = write!(out, "\t{v:.6}");
                        }
                        None => out.push_str("\tNA"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}
