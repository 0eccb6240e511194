//! Fingerprint and coordinate files, RSS standardization.
//!
//! Fingerprint file:
//!
//! ```text
//! #dailoc-fp v1 building=<id> aps=<n>
//! sample_id,device_id,epoch,rp_label|_,rss_0,...,rss_{n-1}
//! ```
//!
//! Coordinate file: one `rp_id,x,y,z` row per RP. Reals are written in
//! 17-significant-digit scientific notation so they read back bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::DomainKey;
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const RSS_FLOOR_DBM: f64 = -100.0;
pub const RSS_CEIL_DBM: f64 = 0.0;
const FP_MAGIC: &str = "#dailoc-fp";
const FP_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintRecord {
    pub sample_id: u64,
    pub device: String,
    pub epoch: u32,
    pub rp: Option<usize>,
    /// dBm in `[-100, 0]`; `-100` marks an undetected AP.
    pub rss: Vec<f64>,
}

impl FingerprintRecord {
    pub fn key(&self) -> DomainKey {
        DomainKey::new(self.device.clone(), self.epoch)
    }

    pub fn standardized(&self) -> Result<Vec<f64>> {
        standardize_with_id(&self.rss, self.sample_id)
    }
}

/// Records sharing one building and AP count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub building: String,
    pub n_aps: usize,
    pub records: Vec<FingerprintRecord>,
}

impl Dataset {
    pub fn new(building: impl Into<String>, n_aps: usize) -> Self {
        Self {
            building: building.into(),
            n_aps,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: FingerprintRecord) -> Result<()> {
        if r.rss.len() != self.n_aps {
            return Err(Error::Schema(format!(
                "sample {} has {} APs, dataset has {}",
                r.sample_id,
                r.rss.len(),
                self.n_aps
            )));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one domain, in file order.
    pub fn domain(&self, key: &DomainKey) -> Vec<&FingerprintRecord> {
        self.records
            .iter()
            .filter(|r| r.device == key.device && r.epoch == key.epoch)
            .collect()
    }
}

/// Standardized inputs (`batch × n_aps`) plus labels where present.
pub fn to_matrix(records: &[&FingerprintRecord]) -> Result<(Matrix, Vec<Option<usize>>)> {
    let rows = records
        .iter()
        .map(|r| r.standardized())
        .collect::<Result<Vec<_>>>()?;
    let labels = records.iter().map(|r| r.rp).collect();
    let m = if rows.is_empty() {
        Matrix::zeros(0, 0)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok((m, labels))
}

/// `v ↦ (v + 100) / 100`: −100 dBm → 0, 0 dBm → 1.
pub fn standardize_rss(raw: &[f64]) -> Result<Vec<f64>> {
    standardize_with_id(raw, 0)
}

fn standardize_with_id(raw: &[f64], sample_id: u64) -> Result<Vec<f64>> {
    raw.iter()
        .enumerate()
        .map(|(ap, &v)| {
            if (RSS_FLOOR_DBM..=RSS_CEIL_DBM).contains(&v) {
                Ok((v - RSS_FLOOR_DBM) / (RSS_CEIL_DBM - RSS_FLOOR_DBM))
            } else {
                Err(Error::RssRange {
                    sample_id,
                    ap,
                    value: v,
                })
            }
        })
        .collect()
}

pub fn destandardize_rss(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| v * (RSS_CEIL_DBM - RSS_FLOOR_DBM) + RSS_FLOOR_DBM)
        .collect()
}

/// RP index → `(x, y, z)` in meters, dense over `[0, n_rps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTable {
    coords: Vec<[f64; 3]>,
}

impl CoordinateTable {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, rp: usize) -> Result<[f64; 3]> {
        self.coords.get(rp).copied().ok_or_else(|| {
            Error::Lookup(format!("rp {rp} not in coordinate table of {}", self.len()))
        })
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.coords
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_fingerprints(ds: &Dataset) -> String {
    let mut out = format!(
        "{FP_MAGIC} {FP_VERSION} building={} aps={}\n",
        ds.building, ds.n_aps
    );
    for r in &ds.records {
        out.push_str(&r.sample_id.to_string());
        out.push(',');
        out.push_str(&r.device);
        out.push(',');
        out.push_str(&r.epoch.to_string());
        out.push(',');
        match r.rp {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push('_'),
        }
        for v in &r.rss {
            out.push(',');
            out.push_str(&fmt_real(*v));
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Result<(String, usize)> {
    let bad = |msg: &str| Error::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(FP_MAGIC) {
        return Err(bad("missing #dailoc-fp header"));
    }
    match parts.next() {
        Some(FP_VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported version {v}"))),
        None => return Err(bad("missing version")),
    }
    let (mut building, mut aps) = (None, None);
    for kv in parts {
        match kv.split_once('=') {
            Some(("building", v)) => building = Some(v.to_string()),
            Some(("aps", v)) => {
                aps = Some(v.parse::<usize>().map_err(|_| bad("aps is not a count"))?)
            }
            _ => return Err(bad(&format!("unexpected header field `{kv}`"))),
        }
    }
    match (building, aps) {
        (Some(b), Some(n)) => Ok((b, n)),
        _ => Err(bad("header needs building= and aps=")),
    }
}

pub fn parse_fingerprints(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let (building, n_aps) = parse_header(header)?;
    let mut ds = Dataset::new(building, n_aps);
    let n_lines = text.lines().count();
    let ends_clean = text.ends_with('\n');
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        // the writer terminates every record, so a bare final line was cut off
        if lineno == n_lines && !ends_clean {
            return Err(perr("truncated record (no line terminator)".into()));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + n_aps {
            return Err(Error::Schema(format!(
                "line {lineno}: expected {n_aps} APs, found {}",
                fields.len().saturating_sub(4)
            )));
        }
        let sample_id = fields[0]
            .parse::<u64>()
            .map_err(|_| perr(format!("bad sample id `{}`", fields[0])))?;
        let device = fields[1].to_string();
        if device.is_empty() {
            return Err(perr("empty device id".into()));
        }
        let epoch = fields[2]
            .parse::<u32>()
            .map_err(|_| perr(format!("bad epoch `{}`", fields[2])))?;
        let rp = match fields[3] {
            "_" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| perr(format!("bad rp label `{s}`")))?,
            ),
        };
        let rss = fields[4..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| perr(format!("bad rss value `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        ds.records.push(FingerprintRecord {
            sample_id,
            device,
            epoch,
            rp,
            rss,
        });
    }
    Ok(ds)
}

pub fn save_fingerprints(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, write_fingerprints(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_fingerprints(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fingerprints(&text)
}

pub fn write_coordinates(table: &CoordinateTable) -> String {
    let mut out = String::new();
    for (i, c) in table.coords.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            fmt_real(c[0]),
            fmt_real(c[1]),
            fmt_real(c[2])
        ));
    }
    out
}

pub fn parse_coordinates(text: &str) -> Result<CoordinateTable> {
    let mut coords: Vec<Option<[f64; 3]>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "rp_id,x,y,z" {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(perr(format!(
                "expected rp_id,x,y,z, got {} fields",
                f.len()
            )));
        }
        let id = f[0]
            .parse::<usize>()
            .map_err(|_| perr(format!("bad rp id `{}`", f[0])))?;
        let mut xyz = [0.0; 3];
        for (k, s) in f[1..].iter().enumerate() {
            xyz[k] = s
                .parse::<f64>()
                .map_err(|_| perr(format!("bad coordinate `{s}`")))?;
        }
        if coords.len() <= id {
            coords.resize(id + 1, None);
        }
        if coords[id].replace(xyz).is_some() {
            return Err(perr(format!("duplicate rp id {id}")));
        }
    }
    let coords = coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| Error::Schema(format!("rp {i} missing from coordinate file")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoordinateTable { coords })
}

pub fn save_coordinates(path: &Path, table: &CoordinateTable) -> Result<()> {
    fs::write(path, write_coordinates(table)).map_err(|e| Error::io(path, e))
}

pub fn load_coordinates(path: &Path) -> Result<CoordinateTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coordinates(&text)
}

/// Loads a fingerprint file together with its coordinate table and checks
/// that every label has coordinates.
pub fn load_dataset(fp_path: &Path, coords_path: &Path) -> Result<(Dataset, CoordinateTable)> {
    let ds = load_fingerprints(fp_path)?;
    let coords = load_coordinates(coords_path)?;
    if let Some(r) = ds
        .records
        .iter()
        .find(|r| r.rp.is_some_and(|l| l >= coords.len()))
    {
        return Err(Error::Schema(format!(
            "sample {} labelled rp {:?} but only {} coordinates",
            r.sample_id,
            r.rp,
            coords.len()
        )));
    }
    Ok((ds, coords))
}

pub fn save_dataset(
    fp_path: &Path,
    coords_path: &Path,
    ds: &Dataset,
    coords: &CoordinateTable,
) -> Result<()> {
    save_fingerprints(fp_path, ds)?;
    save_coordinates(coords_path, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ds() -> Dataset {
        let mut ds = Dataset::new("b1", 3);
        ds.push(FingerprintRecord {
            sample_id: 4,
            device: "BLU".into(),
            epoch: 0,
            rp: Some(2),
            rss: vec![-100.0, -43.123456789012345, 0.0],
        })
        .unwrap();
        ds.push(FingerprintRecord {
            sample_id: 9,
            device: "S7".into(),
            epoch: 3,
            rp: None,
            rss: vec![-71.5, -99.99999999, -1e-9],
        })
        .unwrap();
        ds
    }

    #[test]
    fn standardization_anchors() {
        assert_eq!(
            standardize_rss(&[-100.0, 0.0, -50.0]).unwrap(),
            vec![0.0, 1.0, 0.5]
        );
    }

    #[test]
    fn out_of_range_names_sample_and_ap() {
        let r = FingerprintRecord {
            sample_id: 17,
            device: "HTC".into(),
            epoch: 1,
            rp: None,
            rss: vec![-20.0, 3.0],
        };
        match r.standardized() {
            Err(Error::RssRange { sample_id, ap, .. }) => assert_eq!((sample_id, ap), (17, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_and_row_format() {
        let text = write_fingerprints(&sample_ds());
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("#dailoc-fp v1 building=b1 aps=3"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("4,BLU,0,2,"), "{row}");
        assert!(lines.next().unwrap().starts_with("9,S7,3,_,"));
    }

    #[test]
    fn round_trip_is_exact_and_labels_optional() {
        let ds = sample_ds();
        let back = parse_fingerprints(&write_fingerprints(&ds)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.records[1].rp, None);
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = write_fingerprints(&sample_ds());
        let cut = &text[..text.len() - 12];
        match parse_fingerprints(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ap_count_mismatch_is_schema_error() {
        let text = "#dailoc-fp v1 building=b aps=2\n1,BLU,0,0,-50,-60,-70\n";
        assert!(matches!(parse_fingerprints(text), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_row_is_parse_error_with_line() {
        let text = "#dailoc-fp v1 building=b aps=2\n1,BLU,0,0,-50,-60\n2,BLU,x,0,-50,-60\n";
        match parse_fingerprints(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(
            parse_fingerprints("building=b aps=2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn coordinates_round_trip_and_gap_detection() {
        let t = CoordinateTable::new(vec![[0.0, 0.0, 0.0], [1.0, 2.5, 0.0], [0.1, 0.2, 0.3]]);
        assert_eq!(parse_coordinates(&write_coordinates(&t)).unwrap(), t);
        assert!(matches!(
            parse_coordinates("0,0,0,0\n2,1,1,0\n"),
            Err(Error::Schema(_))
        ));
        assert!(parse_coordinates("rp_id,x,y,z\n0,1,2,3\n").is_ok());
    }
}
