//! Synthetic multi-domain RSS worlds: log-distance path loss buildings,
//! affine per-device distortions with detection floors, and cumulative
//! temporal drift (AP power changes, AP dropouts, rising ambient noise).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    self, CoordinateTable, Dataset, FingerprintRecord, RSS_CEIL_DBM, RSS_FLOOR_DBM,
};
use crate::domain::DomainKey;
use crate::error::{Error, Result};

/// Distances below this are clamped before taking the log.
pub const MIN_DISTANCE_M: f64 = 0.1;
const AP_MARGIN_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub position: [f64; 3],
    /// Received power at 1 m, dBm.
    pub tx_power: f64,
    pub path_loss_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingLayout {
    pub id: String,
    pub rps: Vec<[f64; 3]>,
    pub aps: Vec<AccessPoint>,
    pub spacing: f64,
}

impl BuildingLayout {
    pub fn n_rps(&self) -> usize {
        self.rps.len()
    }

    pub fn n_aps(&self) -> usize {
        self.aps.len()
    }

    pub fn coordinates(&self) -> CoordinateTable {
        CoordinateTable::new(self.rps.clone())
    }
}

/// Named building shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 60 RPs, 193 APs.
    Building1,
    /// 48 RPs, 168 APs.
    Building2,
    /// 12 RPs, 20 APs: fast desk-scale experiments.
    Toy,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "building1" => Ok(Preset::Building1),
            "building2" => Ok(Preset::Building2),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Input(format!(
                "unknown preset `{s}` (building1, building2, toy)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Building1 => "building1",
            Preset::Building2 => "building2",
            Preset::Toy => "toy",
        }
    }

    /// `(n_rps, n_aps, extent)`.
    pub fn shape(self) -> (usize, usize, (f64, f64)) {
        match self {
            Preset::Building1 => (60, 193, (11.0, 4.0)),
            Preset::Building2 => (48, 168, (11.0, 3.0)),
            Preset::Toy => (12, 20, (3.0, 2.0)),
        }
    }

    pub fn layout(self, seed: u64) -> Result<BuildingLayout> {
        let (n_rps, n_aps, extent) = self.shape();
        let mut b = generate_building(seed, n_rps, n_aps, extent)?;
        b.id = self.name().to_string();
        Ok(b)
    }
}

/// RPs on a 1 m grid filling the extent row by row; APs uniform over the
/// extent plus a margin, 2–3 m high, exponents in `[2, 4]`.
pub fn generate_building(
    seed: u64,
    n_rps: usize,
    n_aps: usize,
    extent: (f64, f64),
) -> Result<BuildingLayout> {
    if n_rps == 0 || n_aps == 0 {
        return Err(Error::Layout("need at least one RP and one AP".into()));
    }
    let spacing = 1.0;
    let (w, h) = extent;
    if !(w >= 0.0 && h >= 0.0) {
        return Err(Error::Layout(format!("invalid extent {extent:?}")));
    }
    let cols = (w / spacing).floor() as usize + 1;
    let rows = n_rps.div_ceil(cols);
    let max_rows = (h / spacing).floor() as usize + 1;
    if rows > max_rows {
        return Err(Error::Layout(format!(
            "{n_rps} RPs at {spacing} m spacing do not fit in {w} x {h} m"
        )));
    }
    let rps = (0..n_rps)
        .map(|i| {
            [
                (i % cols) as f64 * spacing,
                (i / cols) as f64 * spacing,
                0.0,
            ]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aps = (0..n_aps)
        .map(|_| AccessPoint {
            position: [
                rng.gen_range(-AP_MARGIN_M..w + AP_MARGIN_M),
                rng.gen_range(-AP_MARGIN_M..h + AP_MARGIN_M),
                rng.gen_range(2.0..3.0),
            ],
            tx_power: rng.gen_range(-40.0..-25.0),
            path_loss_exponent: rng.gen_range(2.0..=4.0),
        })
        .collect();
    Ok(BuildingLayout {
        id: format!("b{seed}"),
        rps,
        aps,
        spacing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    pub gain: f64,
    pub offset: f64,
    pub noise_sigma: f64,
    /// Readings below this (dBm) are reported as missing.
    pub detection_floor: f64,
}

impl DeviceProfile {
    pub fn new(
        id: &str,
        gain: f64,
        offset: f64,
        noise_sigma: f64,
        detection_floor: f64,
    ) -> Result<Self> {
        if !(noise_sigma >= 0.0) || !(detection_floor >= RSS_FLOOR_DBM) {
            return Err(Error::Input(format!(
                "device {id}: noise σ must be ≥ 0 and floor ≥ -100 dBm"
            )));
        }
        Ok(Self {
            id: id.to_string(),
            gain,
            offset,
            noise_sigma,
            detection_floor,
        })
    }

    pub fn identity(id: &str) -> Self {
        Self {
            id: id.to_string(),
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 0.0,
            detection_floor: RSS_FLOOR_DBM,
        }
    }
}

/// Six phones: the first is the offline collection device.
pub fn default_roster() -> Vec<DeviceProfile> {
    [
        ("BLU", 1.00, 0.0, 2.0, -95.0),
        ("HTC", 0.92, 5.0, 2.5, -92.0),
        ("S7", 1.08, -6.0, 2.0, -96.0),
        ("LG", 0.95, -4.0, 3.0, -90.0),
        ("MOTO", 1.05, 7.0, 2.5, -94.0),
        ("OP3", 0.90, -8.0, 2.0, -93.0),
    ]
    .iter()
    .map(|&(id, g, o, s, f)| DeviceProfile::new(id, g, o, s, f).expect("valid roster"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochDrift {
    /// `(ap, delta dB)` applied from this epoch on.
    pub power_deltas: Vec<(usize, f64)>,
    /// APs that disappear from this epoch on.
    pub dropouts: Vec<usize>,
    pub noise_increment: f64,
}

/// Drift events per epoch; effects accumulate over epochs. Epoch 0 is clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub epochs: Vec<EpochDrift>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub scale: f64,
    /// Fraction of APs receiving a power change each epoch.
    pub power_fraction: f64,
    /// Maximum |Δ| per event at scale 1, dB.
    pub power_delta_db: f64,
    /// Fraction of APs removed over the whole schedule at scale 1.
    pub dropout_fraction: f64,
    pub noise_step_db: f64,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            power_fraction: 0.25,
            power_delta_db: 6.0,
            dropout_fraction: 0.15,
            noise_step_db: 0.3,
        }
    }
}

impl DriftSchedule {
    pub fn none(n_epochs: usize) -> Self {
        Self {
            epochs: vec![EpochDrift::default(); n_epochs],
        }
    }

    /// Random events whose magnitudes are proportional to `params.scale`.
    /// The same seed picks the same APs and directions at every scale, and
    /// the dropout set at a larger scale contains the one at a smaller scale.
    pub fn generate(seed: u64, n_aps: usize, n_epochs: usize, params: &DriftParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f7_5eed);
        let mut order: Vec<usize> = (0..n_aps).collect();
        order.shuffle(&mut rng);
        let later = n_epochs.saturating_sub(1).max(1);
        let total_drop = ((params.dropout_fraction * params.scale * n_aps as f64).round() as usize)
            .min(n_aps.saturating_sub(1));
        let mut epochs = vec![EpochDrift::default()];
        for e in 1..n_epochs {
            let per_epoch = ((params.power_fraction * n_aps as f64).round() as usize).max(1);
            let mut picks: Vec<usize> = (0..n_aps).collect();
            picks.shuffle(&mut rng);
            let power_deltas = picks[..per_epoch.min(n_aps)]
                .iter()
                .map(|&ap| {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    (ap, u * params.power_delta_db * params.scale)
                })
                .collect();
            // dropouts spread evenly over the later epochs
            let lo = total_drop * (e - 1) / later;
            let hi = total_drop * e / later;
            epochs.push(EpochDrift {
                power_deltas,
                dropouts: order[lo..hi].to_vec(),
                noise_increment: params.noise_step_db * params.scale,
            });
        }
        Self { epochs }
    }

    pub fn n_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn power_delta(&self, epoch: usize, ap: usize) -> f64 {
        self.epochs
            .iter()
            .take(epoch + 1)
            .flat_map(|e| &e.power_deltas)
            .filter(|(a, _)| *a == ap)
            .map(|(_, d)| d)
            .sum()
    }

    pub fn dropped(&self, epoch: usize) -> BTreeSet<usize> {
        self.epochs
            .iter()
            .take(epoch + 1)
            .flat_map(|e| e.dropouts.iter().copied())
            .collect()
    }

    pub fn ambient_noise(&self, epoch: usize) -> f64 {
        self.epochs
            .iter()
            .take(epoch + 1)
            .map(|e| e.noise_increment)
            .sum()
    }
}

/// Noise-free received power (dBm) before the device transform.
pub fn path_loss_rss(ap: &AccessPoint, at: [f64; 3], drift_delta: f64) -> f64 {
    let d = ((ap.position[0] - at[0]).powi(2)
        + (ap.position[1] - at[1]).powi(2)
        + (ap.position[2] - at[2]).powi(2))
    .sqrt();
    ap.tx_power + drift_delta - 10.0 * ap.path_loss_exponent * d.max(MIN_DISTANCE_M).log10()
}

/// One raw scan in dBm, clamped to `[-100, 0]`; readings below the device's
/// detection floor and dropped APs read `-100`.
pub fn sample_fingerprint<R: Rng + ?Sized>(
    layout: &BuildingLayout,
    rp: usize,
    device: &DeviceProfile,
    epoch: usize,
    schedule: &DriftSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let at = *layout
        .rps
        .get(rp)
        .ok_or_else(|| Error::Input(format!("rp {rp} not in layout")))?;
    if epoch >= schedule.n_epochs().max(1) {
        return Err(Error::Input(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.n_epochs()
        )));
    }
    let dropped = schedule.dropped(epoch);
    let sigma = device.noise_sigma + schedule.ambient_noise(epoch);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
    Ok(layout
        .aps
        .iter()
        .enumerate()
        .map(|(i, ap)| {
            // drawn for every AP so the stream position is independent of drift
            let n = noise.sample(rng);
            if dropped.contains(&i) {
                return RSS_FLOOR_DBM;
            }
            let clean = path_loss_rss(ap, at, schedule.power_delta(epoch, i));
            let v = device.gain * clean + device.offset + n;
            if v < device.detection_floor {
                RSS_FLOOR_DBM
            } else {
                v.clamp(RSS_FLOOR_DBM, RSS_CEIL_DBM)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Labelled offline data, base device, epoch 0.
    Train,
    /// Labelled onboarding data for a non-base device.
    Onboard,
    /// Unlabelled data for unsupervised adaptation.
    Adapt,
    /// Labelled held-out data.
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Train,
        SplitKind::Onboard,
        SplitKind::Adapt,
        SplitKind::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Onboard => "onboard",
            SplitKind::Adapt => "adapt",
            SplitKind::Test => "test",
        }
    }

    pub fn labelled(self) -> bool {
        !matches!(self, SplitKind::Adapt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub preset: Preset,
    pub roster: Vec<DeviceProfile>,
    pub n_epochs: usize,
    /// Samples per RP for train / onboard / adapt / test splits.
    pub train_per_rp: usize,
    pub onboard_per_rp: usize,
    pub adapt_per_rp: usize,
    pub test_per_rp: usize,
    pub drift: DriftParams,
}

impl ScenarioConfig {
    pub fn new(seed: u64, preset: Preset) -> Self {
        Self {
            seed,
            preset,
            roster: default_roster(),
            n_epochs: 6,
            train_per_rp: 10,
            onboard_per_rp: 5,
            adapt_per_rp: 5,
            test_per_rp: 5,
            drift: DriftParams::default(),
        }
    }

    pub fn with_samples_per_rp(mut self, n: usize) -> Self {
        self.train_per_rp = n;
        self.onboard_per_rp = n;
        self.adapt_per_rp = n;
        self.test_per_rp = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub kind: SplitKind,
    pub key: DomainKey,
    pub records: Vec<FingerprintRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub layout: BuildingLayout,
    pub schedule: DriftSchedule,
    pub splits: Vec<Split>,
}

impl Scenario {
    pub fn base_device(&self) -> &DeviceProfile {
        &self.config.roster[0]
    }

    pub fn split(&self, kind: SplitKind, key: &DomainKey) -> Option<&Split> {
        self.splits.iter().find(|s| s.kind == kind && &s.key == key)
    }

    pub fn records(&self, kind: SplitKind, key: &DomainKey) -> Vec<&FingerprintRecord> {
        self.split(kind, key)
            .map(|s| s.records.iter().collect())
            .unwrap_or_default()
    }

    pub fn coordinates(&self) -> CoordinateTable {
        self.layout.coordinates()
    }

    /// All records of one split kind as a dataset.
    pub fn dataset(&self, kind: SplitKind) -> Dataset {
        let mut ds = Dataset::new(self.layout.id.clone(), self.layout.n_aps());
        ds.records = self
            .splits
            .iter()
            .filter(|s| s.kind == kind)
            .flat_map(|s| s.records.iter().cloned())
            .collect();
        ds
    }
}

/// Builds every split. Each sample draws its noise from its own ChaCha
/// stream (keyed by sample id), so generation order does not matter.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    if config.roster.is_empty() {
        return Err(Error::Input("device roster is empty".into()));
    }
    if config.n_epochs == 0 {
        return Err(Error::Input("need at least one epoch".into()));
    }
    let counts = [
        config.train_per_rp,
        config.onboard_per_rp,
        config.adapt_per_rp,
        config.test_per_rp,
    ];
    if counts.contains(&0) {
        return Err(Error::Input("zero samples requested for a split".into()));
    }
    let layout = config.preset.layout(config.seed)?;
    let schedule =
        DriftSchedule::generate(config.seed, layout.n_aps(), config.n_epochs, &config.drift);
    let base = &config.roster[0];

    let mut plan: Vec<(SplitKind, &DeviceProfile, usize, usize)> =
        vec![(SplitKind::Train, base, 0, config.train_per_rp)];
    for dev in &config.roster[1..] {
        for e in 0..config.n_epochs {
            plan.push((SplitKind::Onboard, dev, e, config.onboard_per_rp));
        }
    }
    for dev in &config.roster {
        for e in 0..config.n_epochs {
            plan.push((SplitKind::Adapt, dev, e, config.adapt_per_rp));
            plan.push((SplitKind::Test, dev, e, config.test_per_rp));
        }
    }

    let mut next_id = 0u64;
    let mut splits = Vec::with_capacity(plan.len());
    for (kind, dev, epoch, per_rp) in plan {
        let mut records = Vec::with_capacity(per_rp * layout.n_rps());
        for _ in 0..per_rp {
            for rp in 0..layout.n_rps() {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(next_id);
                let rss = sample_fingerprint(&layout, rp, dev, epoch, &schedule, &mut rng)?;
                records.push(FingerprintRecord {
                    sample_id: next_id,
                    device: dev.id.clone(),
                    epoch: epoch as u32,
                    rp: kind.labelled().then_some(rp),
                    rss,
                });
                next_id += 1;
            }
        }
        splits.push(Split {
            kind,
            key: DomainKey::new(dev.id.clone(), epoch as u32),
            records,
        });
    }
    Ok(Scenario {
        config: config.clone(),
        layout,
        schedule,
        splits,
    })
}

/// Human-readable scenario manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub schema: String,
    pub config: ScenarioConfig,
    pub building: String,
    pub n_rps: usize,
    pub n_aps: usize,
    pub epoch_labels: Vec<String>,
    pub schedule: DriftSchedule,
    pub layout: BuildingLayout,
    pub files: Vec<ManifestFile>,
    pub splits: Vec<ManifestSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub kind: SplitKind,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub kind: SplitKind,
    pub device: String,
    pub epoch: u32,
    pub count: usize,
    pub first_sample_id: u64,
}

/// Labels for the default six collection instances.
pub fn epoch_labels(n: usize) -> Vec<String> {
    const LABELS: [&str; 6] = ["T0", "9h", "1d", "1w", "1m", "3m"];
    (0..n)
        .map(|i| {
            LABELS
                .get(i)
                .map_or_else(|| format!("T{i}"), |s| s.to_string())
        })
        .collect()
}

impl Scenario {
    pub fn manifest(&self, files: Vec<ManifestFile>) -> ScenarioManifest {
        ScenarioManifest {
            schema: "inloc-scenario v1".into(),
            config: self.config.clone(),
            building: self.layout.id.clone(),
            n_rps: self.layout.n_rps(),
            n_aps: self.layout.n_aps(),
            epoch_labels: epoch_labels(self.config.n_epochs),
            schedule: self.schedule.clone(),
            layout: self.layout.clone(),
            files,
            splits: self
                .splits
                .iter()
                .map(|s| ManifestSplit {
                    kind: s.kind,
                    device: s.key.device.clone(),
                    epoch: s.key.epoch,
                    count: s.records.len(),
                    first_sample_id: s.records.first().map_or(0, |r| r.sample_id),
                })
                .collect(),
        }
    }

    /// Rebuilds splits from the manifest's listing and the loaded split files.
    pub fn from_parts(manifest: &ScenarioManifest, data: &[(SplitKind, Dataset)]) -> Result<Self> {
        let mut splits = Vec::with_capacity(manifest.splits.len());
        for ms in &manifest.splits {
            let ds = data
                .iter()
                .find(|(k, _)| *k == ms.kind)
                .map(|(_, d)| d)
                .ok_or_else(|| Error::Schema(format!("no {} file", ms.kind.name())))?;
            let records: Vec<FingerprintRecord> = ds
                .records
                .iter()
                .filter(|r| r.device == ms.device && r.epoch == ms.epoch)
                .cloned()
                .collect();
            if records.len() != ms.count {
                return Err(Error::Schema(format!(
                    "{} split {}@{}: manifest lists {} records, file has {}",
                    ms.kind.name(),
                    ms.device,
                    ms.epoch,
                    ms.count,
                    records.len()
                )));
            }
            splits.push(Split {
                kind: ms.kind,
                key: DomainKey::new(ms.device.clone(), ms.epoch),
                records,
            });
        }
        Ok(Self {
            config: manifest.config.clone(),
            layout: manifest.layout.clone(),
            schedule: manifest.schedule.clone(),
            splits,
        })
    }
}

pub const SCENARIO_FILE: &str = "scenario.json";
pub const COORDS_FILE: &str = "coords.csv";

fn split_file(kind: SplitKind) -> String {
    format!("{}.csv", kind.name())
}

/// Writes one fingerprint file per split kind, the coordinate table, and
/// `scenario.json` into `dir`.
pub fn save_scenario(dir: &Path, scenario: &Scenario) -> Result<ScenarioManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for kind in SplitKind::ALL {
        let name = split_file(kind);
        dataio::save_fingerprints(&dir.join(&name), &scenario.dataset(kind))?;
        files.push(ManifestFile { kind, path: name });
    }
    dataio::save_coordinates(&dir.join(COORDS_FILE), &scenario.coordinates())?;
    let manifest = scenario.manifest(files);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(SCENARIO_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let path = dir.join(SCENARIO_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ScenarioManifest =
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    if manifest.schema != "inloc-scenario v1" {
        return Err(Error::Schema(format!(
            "unknown scenario schema {:?}",
            manifest.schema
        )));
    }
    let mut data = Vec::new();
    for f in &manifest.files {
        let (ds, _) = dataio::load_dataset(&dir.join(&f.path), &dir.join(COORDS_FILE))?;
        if ds.n_aps != manifest.n_aps {
            return Err(Error::Schema(format!(
                "{} has {} APs, manifest says {}",
                f.path, ds.n_aps, manifest.n_aps
            )));
        }
        data.push((f.kind, ds));
    }
    let coords = dataio::load_coordinates(&dir.join(COORDS_FILE))?;
    let scenario = Scenario::from_parts(&manifest, &data)?;
    if coords != scenario.coordinates() {
        return Err(Error::Schema(
            "coordinate file disagrees with layout".into(),
        ));
    }
    Ok(scenario)
}
