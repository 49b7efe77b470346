//! Seeded replications of one victim over attacks × budgets.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use fairpoison_core::attack::{selected_features, EngConfig, PoisonPlan};
use fairpoison_core::dataio::Dataset;
use fairpoison_core::eval::EvalReport;
use fairpoison_core::objective::{ObjectiveVariant, ScoreKind};
use fairpoison_core::pipeline::{prepare, run_attack, run_control, AttackKind, PipelineSpec, Prepared};
use fairpoison_core::theory::{estimate_constants, min_poison_ratio, EstimateSpec, MinRatio, TheoryEstimates};
use fairpoison_core::victims::VictimKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, TheorySection};

/// Features count as selected when some poison row moves them by more than this.
pub const SELECTION_TOLERANCE: f64 = 1e-8;

/// One attacked replication, successful or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub victim: VictimKind,
    pub attack: AttackKind,
    pub budget: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub selected_fraction: Option<f64>,
    /// Stem of the PoisonPlan files under `plans/`.
    pub plan_file: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn bce_decrease(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.bce_decrease())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub budget: f64,
    pub estimates: TheoryEstimates,
    pub min_ratio: MinRatio,
    /// Poison rows over training rows.
    pub poison_ratio: f64,
    pub sufficient: bool,
}

/// The control of one seed, shared by every budget: target and training
/// rows, and hence pretraining and continued training, do not depend on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub victim: VictimKind,
    pub seed: u64,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub theory: Vec<TheoryRecord>,
}

/// A crafted perturbation kept for writing.
#[derive(Clone, Debug)]
pub struct NamedPlan {
    pub name: String,
    pub plan: PoisonPlan,
    /// Dataset row index of every poison row.
    pub labels: Vec<usize>,
    pub config: EngConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunArtifact {
    pub version: String,
    pub config_sha256: String,
    pub data_sha256: String,
    pub config: ExperimentConfig,
    pub controls: Vec<ControlRecord>,
    pub runs: Vec<RunRecord>,
    #[serde(skip)]
    pub plans: Vec<NamedPlan>,
    #[serde(skip)]
    pub feature_names: Vec<String>,
}

impl RunArtifact {
    pub fn all_ok(&self) -> bool {
        self.controls.iter().all(|c| c.error.is_none()) && self.runs.iter().all(RunRecord::is_ok)
    }

    pub fn failures(&self) -> Vec<String> {
        let c = self.controls.iter().filter_map(|c| c.error.clone());
        c.chain(self.runs.iter().filter_map(|r| r.error.clone())).collect()
    }

    /// Successful records of `attack` at `budget`, in seed order.
    pub fn records(&self, attack: AttackKind, budget: f64) -> Vec<&RunRecord> {
        self.runs
            .iter()
            .filter(|r| r.attack == attack && r.budget == budget && r.is_ok())
            .collect()
    }

    pub fn plan(&self, name: &str) -> Option<&PoisonPlan> {
        self.plans.iter().find(|p| p.name == name).map(|p| &p.plan)
    }
}

pub fn plan_name(victim: VictimKind, attack: AttackKind, budget: f64, seed: u64) -> String {
    format!("{victim}_{attack}_b{budget}_s{seed}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn dataset_sha256(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in data.x().data() {
        h.update(v.to_le_bytes());
    }
    for a in data.a() {
        h.update((*a as u64).to_le_bytes());
    }
    h.update(data.y());
    hex::encode(h.finalize())
}

fn key<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

type Cache<T> = Mutex<HashMap<String, Arc<T>>>;

fn cached<T>(cache: &Cache<T>, key: String, make: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    if let Some(v) = cache.lock().unwrap().get(&key) {
        return Ok(v.clone());
    }
    let v = Arc::new(make()?);
    Ok(cache.lock().unwrap().entry(key).or_insert(v).clone())
}

/// Runs experiments, reusing loaded data, pretrained victims and controls
/// across calls whose inputs coincide. Every cached value is a pure
/// function of its key, so reuse never changes a result.
#[derive(Default)]
pub struct Runner {
    data: Cache<Dataset>,
    prepared: Cache<(f64, Prepared)>,
    controls: Cache<EvalReport>,
}

struct Unit {
    control: ControlRecord,
    runs: Vec<RunRecord>,
    plans: Vec<NamedPlan>,
}

impl Runner {
    pub fn new() -> Self {
        Runner::default()
    }

    pub fn data(&self, cfg: &ExperimentConfig) -> Result<Arc<Dataset>> {
        cached(&self.data, key(&cfg.data), || cfg.data.load())
    }

    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunArtifact> {
        cfg.validate()?;
        let data = self.data(cfg).context("data")?;
        let done: Vec<Unit> = cfg.seeds.par_iter().map(|&s| self.unit(cfg, &data, s)).collect();
        let mut artifact = RunArtifact {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(key(cfg).as_bytes()),
            data_sha256: dataset_sha256(&data),
            config: cfg.clone(),
            controls: Vec::new(),
            runs: Vec::new(),
            plans: Vec::new(),
            feature_names: data.feature_names().to_vec(),
        };
        for u in done {
            artifact.controls.push(u.control);
            artifact.runs.extend(u.runs);
            artifact.plans.extend(u.plans);
        }
        // budget-major order, seeds within
        let order = |r: &RunRecord| {
            let b = cfg.budgets.iter().position(|&x| x == r.budget);
            let s = cfg.seeds.iter().position(|&x| x == r.seed);
            let a = cfg.attacks.iter().position(|&x| x == r.attack);
            (b, s, a)
        };
        artifact.runs.sort_by_key(order);
        Ok(artifact)
    }

    /// Pretrained replication for `spec`'s seed, re-split to `spec.budget`.
    fn prepared(&self, data: &Dataset, spec: &PipelineSpec) -> Result<Arc<Prepared>> {
        let k = key(&(
            dataset_sha256(data),
            spec.victim,
            &spec.arch,
            &spec.train,
            spec.target_frac,
            spec.split_seed,
            spec.victim_seed,
        ));
        let base = cached(&self.prepared, k, || Ok((spec.budget, prepare(data, spec)?)))?;
        if base.0 == spec.budget {
            Ok(Arc::new(base.1.clone()))
        } else {
            Ok(Arc::new(base.1.with_budget(data, spec)?))
        }
    }

    fn control(&self, data: &Dataset, prep: &Prepared, spec: &PipelineSpec) -> Result<Arc<EvalReport>> {
        let k = key(&(
            dataset_sha256(data),
            spec.victim,
            &spec.arch,
            &spec.train,
            spec.target_frac,
            spec.split_seed,
            spec.victim_seed,
            spec.post_epochs,
            spec.post_batch_size,
            &spec.probe,
            spec.eng.variant.ridge,
        ));
        cached(&self.controls, k, || Ok(run_control(prep, spec)?))
    }

    fn unit(&self, cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Unit {
        let victim = cfg.victim.kind;
        let failed_run = |attack: AttackKind, budget: f64, msg: String| RunRecord {
            victim,
            attack,
            budget,
            seed,
            error: Some(msg),
            report: None,
            selected_fraction: None,
            plan_file: None,
        };
        let failed = |msg: String| Unit {
            control: ControlRecord {
                victim,
                seed,
                error: Some(msg.clone()),
                report: None,
                theory: Vec::new(),
            },
            runs: cfg
                .budgets
                .iter()
                .flat_map(|&b| cfg.attacks.iter().map(move |&a| (a, b)))
                .map(|(a, b)| failed_run(a, b, msg.clone()))
                .collect(),
            plans: Vec::new(),
        };
        let coords = format!("{victim} seed {seed}");
        let base = match cfg.spec(data, AttackKind::None, cfg.budgets[0], seed) {
            Ok(s) => s,
            Err(e) => return failed(format!("{coords}: {e:#}")),
        };
        let prep = match self.prepared(data, &base) {
            Ok(p) => p,
            Err(e) => return failed(format!("{coords}: pretraining: {e:#}")),
        };
        let control = match self.control(data, &prep, &base) {
            Ok(c) => c,
            Err(e) => return failed(format!("{coords}: control: {e:#}")),
        };

        let mut runs = Vec::new();
        let mut plans = Vec::new();
        let mut theory = Vec::new();
        let mut errors = Vec::new();
        for &budget in &cfg.budgets {
            let coords = format!("{victim} budget {budget} seed {seed}");
            let prep = match cfg
                .spec(data, AttackKind::None, budget, seed)
                .and_then(|s| Ok((self.prepared(data, &s)?, s)))
            {
                Ok(p) => p,
                Err(e) => {
                    let msg = format!("{coords}: {e:#}");
                    runs.extend(cfg.attacks.iter().map(|&a| failed_run(a, budget, msg.clone())));
                    continue;
                }
            };
            let (prep, base) = (prep.0, prep.1);
            if let Some(t) = &cfg.theory {
                match theory_record(t, cfg, &prep, &base) {
                    Ok(r) => theory.push(r),
                    Err(e) => errors.push(format!("{coords}: theory: {e:#}")),
                }
            }
            let training_idx = prep.split.training_idx();
            for &attack in &cfg.attacks {
                let mut spec = base.clone();
                spec.attack = attack;
                let mut rec = RunRecord {
                    victim,
                    attack,
                    budget,
                    seed,
                    error: None,
                    report: None,
                    selected_fraction: None,
                    plan_file: None,
                };
                match run_attack(&prep, &spec, &control) {
                    Ok(out) => {
                        if let (Some(plan), AttackKind::Eng(kind)) = (out.plan, attack) {
                            let name = plan_name(victim, attack, budget, seed);
                            rec.selected_fraction = Some(selected_features(&plan, SELECTION_TOLERANCE).fraction);
                            rec.plan_file = Some(name.clone());
                            let mut eng = spec.eng.clone();
                            eng.variant = ObjectiveVariant::with_ridge(kind, spec.eng.variant.ridge);
                            plans.push(NamedPlan {
                                name,
                                labels: plan.rows.iter().map(|&r| training_idx[r]).collect(),
                                plan,
                                config: eng,
                            });
                        }
                        rec.report = Some(out.report);
                    }
                    Err(e) => rec.error = Some(format!("{victim} {attack} budget {budget} seed {seed}: {e:#}")),
                }
                runs.push(rec);
            }
        }
        Unit {
            control: ControlRecord {
                victim,
                seed,
                error: if errors.is_empty() {
                    None
                } else {
                    Some(errors.join("; "))
                },
                report: Some((*control).clone()),
                theory,
            },
            runs,
            plans,
        }
    }
}

fn theory_record(
    t: &TheorySection,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    spec: &PipelineSpec,
) -> Result<TheoryRecord> {
    let kind = cfg
        .attacks
        .iter()
        .find_map(|a| match a {
            AttackKind::Eng(k) => Some(*k),
            _ => None,
        })
        .unwrap_or(ScoreKind::Fld);
    let est = estimate_constants(
        &prep.pretrained,
        &prep.training,
        &prep.target,
        ObjectiveVariant::with_ridge(kind, spec.eng.variant.ridge),
        &EstimateSpec {
            samples: t.samples,
            rows: t.rows,
            lr: spec.train.lr,
            batch_size: spec.post_batch_size.unwrap_or(spec.train.batch_size),
            seed: spec.split_seed,
        },
    )?;
    let min_ratio = min_poison_ratio(&est)?;
    let poison_ratio = prep.poison_rows.len() as f64 / prep.training.len() as f64;
    Ok(TheoryRecord {
        budget: spec.budget,
        estimates: est,
        min_ratio,
        poison_ratio,
        sufficient: poison_ratio >= min_ratio.ratio,
    })
}

/// Runs `cfg` with a fresh [`Runner`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    Runner::new().run(cfg)
}
