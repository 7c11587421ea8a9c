//! CSV tables, the check listing and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rbso::experiments::suite::{Check, SuiteOptions};
use rbso::experiments::{ExperimentConfig, MetricRow, MetricTable};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LabError;

pub const TABLE_HEADER: [&str; 6] = ["experiment", "params", "statistic", "value", "std_err", "samples"];
pub const CHECK_HEADER: [&str; 5] = ["criterion", "check", "value", "bound", "status"];

/// A check tagged with the criterion (or report section) it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub group: String,
    pub check: Check,
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, LabError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| LabError::output(path, e.into()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |e| LabError::output(path, e.into())
}

/// Floats are written in shortest round-trip scientific form.
fn float(x: f64) -> String {
    format!("{x:e}")
}

pub fn write_table(t: &MetricTable, path: &Path) -> Result<(), LabError> {
    let mut w = writer(path)?;
    w.write_record(TABLE_HEADER).map_err(csv_err(path))?;
    for r in &t.rows {
        w.write_record([&r.experiment, &r.params, &r.statistic, &float(r.value), &float(r.std_err), &r.samples.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::output(path, e))
}

pub fn read_table(path: &Path) -> Result<MetricTable, LabError> {
    let bad = |m: String| LabError::output(path, std::io::Error::new(std::io::ErrorKind::InvalidData, m));
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != TABLE_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut t = MetricTable::new(name);
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", TABLE_HEADER[i])));
        t.rows.push(MetricRow {
            experiment: rec[0].to_string(),
            params: rec[1].to_string(),
            statistic: rec[2].to_string(),
            value: f(3)?,
            std_err: f(4)?,
            samples: rec[5].parse().map_err(|e| bad(format!("column samples: {e}")))?,
        });
    }
    Ok(t)
}

pub fn write_checks(rows: &[CheckRow], path: &Path) -> Result<(), LabError> {
    let mut w = writer(path)?;
    w.write_record(CHECK_HEADER).map_err(csv_err(path))?;
    for r in rows {
        let status = if r.check.pass { "PASS" } else { "FAIL" };
        w.write_record([&r.group, &r.check.name, &float(r.check.value), &r.check.bound, status])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::output(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything that determines the outputs of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInputs {
    pub subcommand: String,
    pub seed: u64,
    pub config: Option<ExperimentConfig>,
    pub suite: Option<SuiteOptions>,
}

impl RunInputs {
    /// Content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("inputs serialize").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub inputs: RunInputs,
    pub input_hash: String,
    pub threads: usize,
    pub files: Vec<OutputFile>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub pass: bool,
    pub failed: Vec<String>,
}

/// Record a written file in the manifest.
pub fn file_entry(path: &Path, rows: usize) -> Result<OutputFile, LabError> {
    let bytes = fs::read(path).map_err(|e| LabError::output(path, e))?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    Ok(OutputFile { name, rows, sha256: sha256_hex(&bytes) })
}

pub fn write_manifest(m: &RunManifest, path: &Path) -> Result<(), LabError> {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| LabError::output(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rbso::ModelKind;

    fn table() -> MetricTable {
        let mut t = MetricTable::new("demo");
        t.push("W=9;eta=0.1", "ratio", 1.0 / 3.0, 2.5e-17, 200);
        t.push("W=9;eta=0.2", "max,dev \"quoted\"", -7.25e-300, 0.0, 0);
        t.push("", "big", 1.234_567_890_123_456_7e300, f64::INFINITY, 1);
        t
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demo.csv");
        let t = table();
        write_table(&t, &p).unwrap();
        assert_eq!(read_table(&p).unwrap(), t);
    }

    #[test]
    fn empty_table_is_header_only_with_lf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        write_table(&MetricTable::new("empty"), &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "experiment,params,statistic,value,std_err,samples\n");
        write_table(&table(), &p).unwrap();
        let s = fs::read_to_string(&p).unwrap();
        assert!(!s.contains('\r'));
        assert_eq!(s.lines().count(), 4);
    }

    #[test]
    fn checks_listing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("checks.csv");
        let rows = vec![
            CheckRow { group: "1".into(), check: Check::le("a", 1e-13, 1e-12) },
            CheckRow { group: "1".into(), check: Check::ge("b", 2.0, 3.0) },
        ];
        write_checks(&rows, &p).unwrap();
        let s = fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().next().unwrap(), "criterion,check,value,bound,status");
        assert!(s.lines().nth(1).unwrap().ends_with(",PASS"));
        assert!(s.lines().nth(2).unwrap().ends_with(",FAIL"));
    }

    #[test]
    fn input_hash_tracks_every_input() {
        let cfg = ExperimentConfig::new(ModelKind::WegnerOrbital, 1, 9, 15, 0.5);
        let base = RunInputs { subcommand: "deloc".into(), seed: 1, config: Some(cfg.clone()), suite: None };
        let h = base.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, base.clone().hash());
        let mut v = base.clone();
        v.seed = 2;
        assert_ne!(v.hash(), h);
        let mut v = base.clone();
        v.subcommand = "local-law".into();
        assert_ne!(v.hash(), h);
        let mut c = cfg.clone();
        c.run.etas = vec![0.1, 0.2];
        let v = RunInputs { config: Some(c), ..base.clone() };
        assert_ne!(v.hash(), h);
        let mut c = cfg;
        c.model.lambda = 0.5000001;
        let v = RunInputs { config: Some(c), ..base };
        assert_ne!(v.hash(), h);
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
