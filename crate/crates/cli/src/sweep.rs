//! Grid sweeps, the batch-size defense sweep and the bound simulation.

use std::path::Path;

use anyhow::{bail, Result};
use fairpoison_core::pipeline::AttackKind;
use fairpoison_core::theory::{simulate_bound, SimConfig, SimReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Grid, GridPoint};
use crate::experiment::{RunArtifact, Runner};
use crate::output::{csv_bytes, tidy_rows, write_artifact, write_atomic, write_json, TIDY_HEADER};

pub struct SweepPoint {
    pub point: GridPoint,
    pub error: Option<String>,
    pub artifact: Option<RunArtifact>,
}

impl SweepPoint {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.artifact.as_ref().is_some_and(RunArtifact::all_ok)
    }
}

pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

#[derive(Serialize)]
struct PointSummary<'a> {
    index: usize,
    point: &'a GridPoint,
    status: &'static str,
    errors: Vec<String>,
}

const POINT_HEADER: [&str; 7] = [
    "point",
    "grid_lambda1",
    "grid_lambda2",
    "grid_budget",
    "grid_batch_size",
    "grid_post_batch_size",
    "grid_variant",
];

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.points.iter().all(SweepPoint::is_ok)
    }

    /// Tidy rows prefixed by the grid coordinates; a point that failed as a
    /// whole contributes one row carrying its error.
    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let g = &p.point;
            let opt = |v: Option<String>| v.unwrap_or_default();
            let prefix = vec![
                i.to_string(),
                opt(g.lambda1.map(|v| v.to_string())),
                opt(g.lambda2.map(|v| v.to_string())),
                opt(g.budget.map(|v| v.to_string())),
                opt(g.batch_size.map(|v| v.to_string())),
                opt(g.post_batch_size.map(|v| v.to_string())),
                opt(g.variant.map(|v| v.to_string())),
            ];
            match &p.artifact {
                Some(a) => {
                    for row in tidy_rows(a) {
                        out.push(prefix.iter().cloned().chain(row).collect());
                    }
                }
                None => {
                    let mut row = prefix;
                    row.extend(std::iter::repeat_n(String::new(), TIDY_HEADER.len()));
                    let status = POINT_HEADER.len() + 4;
                    row[status] = "failed".into();
                    row[status + 1] = p.error.clone().unwrap_or_default();
                    out.push(row);
                }
            }
        }
        out
    }

    pub fn header() -> Vec<&'static str> {
        POINT_HEADER.iter().chain(TIDY_HEADER.iter()).copied().collect()
    }

    /// `sweep.csv`, `sweep.json` and one artifact directory per point.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if let Some(a) = &p.artifact {
                write_artifact(a, &dir.join(format!("points/{i:03}")))?;
            }
        }
        write_atomic(&dir.join("sweep.csv"), &csv_bytes(&Self::header(), &self.rows())?)?;
        let summary: Vec<PointSummary> = self
            .points
            .iter()
            .enumerate()
            .map(|(index, p)| PointSummary {
                index,
                point: &p.point,
                status: if p.is_ok() { "ok" } else { "failed" },
                errors: p
                    .error
                    .iter()
                    .cloned()
                    .chain(p.artifact.iter().flat_map(RunArtifact::failures))
                    .collect(),
            })
            .collect();
        write_json(&dir.join("sweep.json"), &summary)
    }
}

/// One run per grid point; a failing point is recorded and the sweep continues.
pub fn sweep(runner: &Runner, base: &ExperimentConfig, grid: &Grid) -> Result<SweepResult> {
    let points = grid.points()?;
    let done = points
        .into_par_iter()
        .map(|point| {
            let run = point.apply(base).and_then(|cfg| runner.run(&cfg));
            match run {
                Ok(a) => SweepPoint {
                    point,
                    error: None,
                    artifact: Some(a),
                },
                Err(e) => SweepPoint {
                    point,
                    error: Some(format!("{e:#}")),
                    artifact: None,
                },
            }
        })
        .collect();
    Ok(SweepResult { points: done })
}

/// Attack effect at one continued-training batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub batch_size: usize,
    pub attack: AttackKind,
    pub budget: f64,
    pub seeds: Vec<u64>,
    /// Control BCE minus attacked BCE, per seed.
    pub bce_decrease: Vec<f64>,
    /// Attacked minus control −s (FLD unless the attack is another ENG variant), per seed.
    pub delta_neg_score: Vec<f64>,
    pub mean_bce_decrease: f64,
    pub mean_delta_neg_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseTable {
    pub rows: Vec<DefenseRow>,
    /// Per attack and budget: mean BCE decrease at the largest batch size is positive.
    pub baseline_succeeds: Vec<(AttackKind, f64, bool)>,
    pub errors: Vec<String>,
}

impl DefenseTable {
    pub fn row(&self, batch_size: usize, attack: AttackKind, budget: f64) -> Option<&DefenseRow> {
        self.rows
            .iter()
            .find(|r| r.batch_size == batch_size && r.attack == attack && r.budget == budget)
    }
}

/// Reruns `cfg` with every continued-training batch size in `batch_sizes`;
/// split, pretraining and crafting seeds stay fixed.
pub fn defense_sweep(runner: &Runner, cfg: &ExperimentConfig, batch_sizes: &[usize]) -> Result<DefenseTable> {
    if batch_sizes.is_empty() {
        bail!("defense sweep needs at least one batch size");
    }
    let grid = Grid {
        post_batch_size: Some(batch_sizes.to_vec()),
        ..Grid::default()
    };
    let result = sweep(runner, cfg, &grid)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (p, &n) in result.points.iter().zip(batch_sizes) {
        let Some(a) = &p.artifact else {
            errors.push(format!("batch size {n}: {}", p.error.clone().unwrap_or_default()));
            continue;
        };
        errors.extend(a.failures());
        for &attack in &cfg.attacks {
            for &budget in &cfg.budgets {
                let recs = a.records(attack, budget);
                let kind = match attack {
                    AttackKind::Eng(k) => k,
                    _ => fairpoison_core::objective::ScoreKind::Fld,
                };
                let bce: Vec<f64> = recs.iter().filter_map(|r| r.bce_decrease()).collect();
                let neg: Vec<f64> = recs
                    .iter()
                    .filter_map(|r| r.report.as_ref()?.deltas.map(|d| -d.scores.get(kind)))
                    .collect();
                let mean = |v: &[f64]| {
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                };
                rows.push(DefenseRow {
                    batch_size: n,
                    attack,
                    budget,
                    seeds: recs.iter().map(|r| r.seed).collect(),
                    mean_bce_decrease: mean(&bce),
                    mean_delta_neg_score: mean(&neg),
                    bce_decrease: bce,
                    delta_neg_score: neg,
                });
            }
        }
    }
    let largest = *batch_sizes.iter().max().expect("non-empty");
    let baseline_succeeds = rows
        .iter()
        .filter(|r| r.batch_size == largest)
        .map(|r| (r.attack, r.budget, r.mean_bce_decrease > 0.0))
        .collect();
    Ok(DefenseTable {
        rows,
        baseline_succeeds,
        errors,
    })
}

pub fn write_defense(table: &DefenseTable, dir: &Path) -> Result<()> {
    let header = [
        "batch_size",
        "attack",
        "budget",
        "seed",
        "bce_decrease",
        "delta_neg_score",
    ];
    let mut rows = Vec::new();
    for r in &table.rows {
        for ((s, b), n) in r.seeds.iter().zip(&r.bce_decrease).zip(&r.delta_neg_score) {
            rows.push(vec![
                r.batch_size.to_string(),
                r.attack.to_string(),
                r.budget.to_string(),
                s.to_string(),
                b.to_string(),
                n.to_string(),
            ]);
        }
    }
    write_atomic(&dir.join("defense.csv"), &csv_bytes(&header, &rows)?)?;
    write_json(&dir.join("defense.json"), table)
}

/// A simulation file: a `[simulate]` table plus an optional output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    pub simulate: SimConfig,
    pub out_dir: Option<std::path::PathBuf>,
}

impl SimFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        use anyhow::Context;
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut f: SimFile = toml::from_str(&text).with_context(|| format!("in {}", path.display()))?;
        if let Some(d) = &mut f.out_dir {
            if d.is_relative() {
                *d = path.parent().unwrap_or(Path::new("")).join(&*d);
            }
        }
        f.simulate.validate()?;
        Ok(f)
    }
}

pub fn run_simulation(sim: &SimConfig) -> Result<SimReport> {
    Ok(simulate_bound(sim)?)
}

pub fn write_simulation(report: &SimReport, dir: &Path) -> Result<()> {
    let header = [
        "ratio",
        "poison",
        "sufficient",
        "holds_fraction",
        "mean_delta_u",
        "target",
        "max_noise_energy",
        "noise_within_bound",
    ];
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            vec![
                p.ratio.to_string(),
                p.poison.to_string(),
                p.sufficient.to_string(),
                p.holds_fraction.to_string(),
                p.mean_delta_u.to_string(),
                p.target.to_string(),
                p.max_noise_energy.to_string(),
                p.noise_within_bound.to_string(),
            ]
        })
        .collect();
    write_atomic(&dir.join("simulation.csv"), &csv_bytes(&header, &rows)?)?;
    write_json(&dir.join("simulation.json"), report)
}
