//! Run directories: a checkpoint, a manifest, and per-command artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use inloc_core::checkpoint;
use inloc_core::domain::DomainKey;
use inloc_core::eval::PseudoLabelStats;
use inloc_core::incremental::{AdaptationConfig, EventKind, Learner};
use inloc_core::simgen::Scenario;
use serde::{Deserialize, Serialize};

pub const RUN_SCHEMA: &str = "inloc-run v1";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const ADAPTATION: &str = "adaptation.json";
pub const EVALUATION: &str = "evaluation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub dir: PathBuf,
    pub building: String,
    pub scenario_seed: u64,
}

impl DataRef {
    pub fn of(dir: &Path, scenario: &Scenario) -> Self {
        Self {
            dir: absolute(dir),
            building: scenario.layout.id.clone(),
            scenario_seed: scenario.config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub kind: EventKind,
    pub key: DomainKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub tool_version: String,
    pub data: Option<DataRef>,
    pub parent: Option<PathBuf>,
    pub event: Option<RunEvent>,
    pub config: Option<AdaptationConfig>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            schema: RUN_SCHEMA.to_string(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            data: None,
            parent: None,
            event: None,
            config: None,
            outputs: Vec::new(),
        }
    }
}

/// Adaptation record kept next to the checkpoint of an `adapt` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub report: inloc_core::incremental::AdaptationReport,
    pub pseudo_labels: Option<PseudoLabelStats>,
}

pub fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let m: RunManifest = read_json(&dir.join(MANIFEST))?;
    if m.schema != RUN_SCHEMA {
        bail!("{}: unknown run schema {:?}", dir.display(), m.schema);
    }
    Ok(m)
}

pub fn load_learner(dir: &Path) -> Result<Learner> {
    let path = dir.join(CHECKPOINT);
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn save_run(dir: &Path, learner: &Learner, mut manifest: RunManifest) -> Result<()> {
    checkpoint::save(learner, &dir.join(CHECKPOINT))?;
    manifest.outputs.insert(0, CHECKPOINT.to_string());
    manifest.config = Some(learner.config.clone());
    write_json(&dir.join(MANIFEST), &manifest)
}

/// One ancestor of a run, oldest first.
pub struct Ancestor {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Follows `parent` links from `dir` back to the pretraining run.
pub fn lineage(dir: &Path) -> Result<Vec<Ancestor>> {
    let mut chain = Vec::new();
    let mut cur = Some(absolute(dir));
    while let Some(d) = cur {
        if chain.len() > 10_000 {
            bail!("run lineage does not terminate");
        }
        let manifest = read_manifest(&d)?;
        if !d.join(CHECKPOINT).exists() {
            bail!("missing checkpoint in {}", d.display());
        }
        cur = manifest.parent.clone();
        chain.push(Ancestor { dir: d, manifest });
    }
    chain.reverse();
    Ok(chain)
}
