//! Report files. Every file is written to a temporary name and renamed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::experiment::{ControlRecord, RunArtifact, RunRecord, SELECTION_TOLERANCE};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Column names of the tidy results table.
pub const TIDY_HEADER: [&str; 24] = [
    "victim",
    "attack",
    "budget",
    "seed",
    "status",
    "error",
    "bce_probe",
    "control_bce_probe",
    "bce_decrease",
    "dp_violation",
    "control_dp_violation",
    "y_accuracy",
    "control_y_accuracy",
    "fld",
    "sfld",
    "euc",
    "delta_fld",
    "delta_sfld",
    "delta_euc",
    "l1",
    "l2",
    "linf",
    "mean_row_l1",
    "selected_fraction",
];

/// One row per seed × budget × attack.
pub fn tidy_row(run: &RunRecord, control: Option<&ControlRecord>) -> Vec<String> {
    let r = run.report.as_ref();
    let c = control.and_then(|c| c.report.as_ref());
    let d = r.and_then(|r| r.deltas);
    let p = r.and_then(|r| r.perturbation);
    vec![
        run.victim.to_string(),
        run.attack.to_string(),
        run.budget.to_string(),
        run.seed.to_string(),
        if run.is_ok() { "ok" } else { "failed" }.to_string(),
        run.error.clone().unwrap_or_default(),
        num(r.map(|r| r.bce_probe)),
        num(c.map(|c| c.bce_probe)),
        num(d.map(|d| -d.bce_probe)),
        num(r.map(|r| r.dp_violation)),
        num(c.map(|c| c.dp_violation)),
        num(r.map(|r| r.y_accuracy)),
        num(c.map(|c| c.y_accuracy)),
        num(r.map(|r| r.scores.fld)),
        num(r.map(|r| r.scores.sfld)),
        num(r.map(|r| r.scores.euc)),
        num(d.map(|d| d.scores.fld)),
        num(d.map(|d| d.scores.sfld)),
        num(d.map(|d| d.scores.euc)),
        num(p.map(|p| p.l1)),
        num(p.map(|p| p.l2)),
        num(p.map(|p| p.linf)),
        num(p.map(|p| p.mean_row_l1)),
        num(run.selected_fraction),
    ]
}

pub fn tidy_rows(artifact: &RunArtifact) -> Vec<Vec<String>> {
    artifact
        .runs
        .iter()
        .map(|run| {
            let control = artifact.controls.iter().find(|c| c.seed == run.seed);
            tidy_row(run, control)
        })
        .collect()
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    version: String,
    files: Vec<ManifestEntry>,
}

/// Writes `report.json`, `results.csv`, `plans/*.{csv,json}` and a
/// `manifest.json` with the checksum of each; returns the paths written.
pub fn write_artifact(artifact: &RunArtifact, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut report = serde_json::to_string_pretty(artifact)?;
    report.push('\n');
    files.push(("report.json".into(), report.into_bytes()));
    files.push(("results.csv".into(), csv_bytes(&TIDY_HEADER, &tidy_rows(artifact))?));
    for p in &artifact.plans {
        let mut csv = Vec::new();
        p.plan.write_csv(&mut csv, &p.labels, &artifact.feature_names)?;
        files.push((format!("plans/{}.csv", p.name), csv));
        let sidecar = p.plan.sidecar(&p.config, &artifact.feature_names, SELECTION_TOLERANCE);
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        files.push((format!("plans/{}.json", p.name), json.into_bytes()));
    }
    let mut written = Vec::new();
    let mut manifest = Manifest {
        version: artifact.version.clone(),
        files: Vec::new(),
    };
    for (name, bytes) in &files {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        manifest.files.push(ManifestEntry {
            path: name.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        written.push(path);
    }
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}
