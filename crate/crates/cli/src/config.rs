//! Experiment and grid files (TOML).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fairpoison_core::attack::EngConfig;
use fairpoison_core::dataio::{load_csv, synth_generate, CsvSchema, Dataset, SynthConfig};
use fairpoison_core::eval::ProbeConfig;
use fairpoison_core::objective::ScoreKind;
use fairpoison_core::pipeline::{AttackKind, PipelineSpec};
use fairpoison_core::victims::{Arch, LossWeights, OptimizerKind, TrainConfig, VictimKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthConfig),
    Csv {
        /// Relative paths are resolved against the config file's directory.
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(s) => Ok(synth_generate(s)?),
            DataSource::Csv { path, schema } => {
                load_csv(path, schema).with_context(|| format!("loading {}", path.display()))
            }
        }
    }
}

/// Optimizer settings that differ from the victim family's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    /// Pretraining epochs.
    pub epochs: Option<usize>,
    pub shuffle: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    pub kind: VictimKind,
    #[serde(default = "default_repr_dim")]
    pub repr_dim: usize,
    #[serde(default)]
    pub encoder_hidden: usize,
    #[serde(default = "default_aux_hidden")]
    pub aux_hidden: usize,
    #[serde(default)]
    pub classifier: Option<bool>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub train: TrainOverrides,
}

fn default_repr_dim() -> usize {
    8
}

fn default_aux_hidden() -> usize {
    50
}

impl VictimSection {
    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::defaults_for(self.kind);
        let o = &self.train;
        if let Some(v) = o.optimizer {
            tc.optimizer = v;
        }
        if let Some(v) = o.lr {
            tc.lr = v;
        }
        if let Some(v) = o.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = o.epochs {
            tc.epochs = v;
        }
        if let Some(v) = o.shuffle {
            tc.shuffle = v;
        }
        if let Some(v) = o.seed {
            tc.seed = v;
        }
        tc
    }
}

/// Estimate the bound's constants on every pretrained victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_rows")]
    pub rows: usize,
}

fn default_samples() -> usize {
    20
}

fn default_rows() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub victim: VictimSection,
    /// `none` runs the control schedule as an attack of its own.
    pub attacks: Vec<AttackKind>,
    #[serde(default)]
    pub eng: EngConfig,
    #[serde(default)]
    pub anchor_tau: f64,
    /// Poison fractions of the training rows.
    pub budgets: Vec<f64>,
    #[serde(default = "default_target_frac")]
    pub target_frac: f64,
    #[serde(default = "default_post_epochs")]
    pub post_epochs: usize,
    /// Batch size while training continues on poisoned data.
    #[serde(default)]
    pub post_batch_size: Option<usize>,
    /// Split seeds, one replication each.
    pub seeds: Vec<u64>,
    #[serde(default = "default_victim_seed")]
    pub victim_seed: u64,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub theory: Option<TheorySection>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_target_frac() -> f64 {
    0.2
}

fn default_post_epochs() -> usize {
    20
}

fn default_victim_seed() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Reads, resolves relative paths against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        if let DataSource::Csv { path, .. } = &mut cfg.data {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base_dir.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        if self.budgets.is_empty() {
            bail!("budgets: at least one budget is required");
        }
        for (i, b) in self.budgets.iter().enumerate() {
            if !(*b > 0.0 && *b < 1.0) {
                bail!("budgets[{i}] = {b} is outside (0, 1)");
            }
        }
        if self.attacks.is_empty() {
            bail!("attacks: at least one attack is required");
        }
        let mut seen = HashSet::new();
        for (i, a) in self.attacks.iter().enumerate() {
            if !seen.insert(*a) {
                bail!("attacks[{i}]: `{a}` is listed twice");
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(*s) {
                bail!("seeds[{i}]: {s} is listed twice");
            }
        }
        if !(self.target_frac > 0.0 && self.target_frac < 1.0) {
            bail!("target_frac = {} is outside (0, 1)", self.target_frac);
        }
        if self.victim.repr_dim == 0 {
            bail!("victim.repr_dim must be positive");
        }
        if self.post_batch_size == Some(0) {
            bail!("post_batch_size must be positive");
        }
        if !(self.anchor_tau >= 0.0) {
            bail!("anchor_tau must be non-negative");
        }
        if let Some(t) = &self.theory {
            if t.samples == 0 || t.rows == 0 {
                bail!("theory.samples and theory.rows must be positive");
            }
        }
        self.eng.validate().context("eng")?;
        if let DataSource::Synth(s) = &self.data {
            s.validate().context("data")?;
        }
        Ok(())
    }

    pub fn arch(&self, data: &Dataset) -> Arch {
        let v = &self.victim;
        let mut arch = Arch::new(data.n_features(), v.repr_dim)
            .encoder_hidden(v.encoder_hidden)
            .aux_hidden(v.aux_hidden)
            .sensitive_classes(data.sensitive_classes())
            .weights(v.weights);
        arch.classifier = v.classifier;
        arch
    }

    /// The replication of `attack` at `budget` with split seed `seed`.
    pub fn spec(&self, data: &Dataset, attack: AttackKind, budget: f64, seed: u64) -> Result<PipelineSpec> {
        let mut spec = PipelineSpec::new(self.victim.kind, self.arch(data), attack);
        spec.train = self.victim.train_config();
        spec.eng = self.eng.clone();
        spec.anchor_tau = self.anchor_tau;
        spec.budget = budget;
        spec.target_frac = self.target_frac;
        spec.post_epochs = self.post_epochs;
        spec.post_batch_size = self.post_batch_size;
        spec.split_seed = seed;
        spec.victim_seed = self.victim_seed;
        spec.probe = self.probe.clone();
        spec.validate()?;
        spec.train.validate(data.len())?;
        Ok(spec)
    }

    /// Loads the data and builds every replication's spec.
    pub fn check_with_data(&self) -> Result<Dataset> {
        let data = self.data.load().context("data")?;
        for &b in &self.budgets {
            for &s in &self.seeds {
                for &a in &self.attacks {
                    self.spec(&data, a, b, s)
                        .with_context(|| format!("{a} at budget {b}, seed {s}"))?;
                }
            }
        }
        Ok(data)
    }

    /// Number of attacked reports a run produces.
    pub fn n_runs(&self) -> usize {
        self.seeds.len() * self.budgets.len() * self.attacks.len()
    }
}

/// Sweep axes; every present key must list at least one value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lambda1: Option<Vec<f64>>,
    pub lambda2: Option<Vec<f64>>,
    /// Ties λ2 to λ1 (λ2 = ratio · λ1); excludes `lambda2`.
    pub lambda2_ratio: Option<f64>,
    pub budget: Option<Vec<f64>>,
    /// Training batch size for pretraining and continued training.
    pub batch_size: Option<Vec<usize>>,
    /// Batch size for continued training only.
    pub post_batch_size: Option<Vec<usize>>,
    /// Replaces every ENG attack of the base config with this variant.
    pub variant: Option<Vec<ScoreKind>>,
}

/// One combination of grid values; `None` keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub budget: Option<f64>,
    pub batch_size: Option<usize>,
    pub post_batch_size: Option<usize>,
    pub variant: Option<ScoreKind>,
}

impl Grid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Cartesian product in the order λ1, λ2, budget, batch size, post batch size, variant.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        fn axis<T: Copy>(name: &str, v: &Option<Vec<T>>) -> Result<Vec<Option<T>>> {
            match v {
                None => Ok(vec![None]),
                Some(v) if v.is_empty() => Err(anyhow!("grid.{name} is empty")),
                Some(v) => Ok(v.iter().copied().map(Some).collect()),
            }
        }
        let present = [
            self.lambda1.is_some(),
            self.lambda2.is_some(),
            self.budget.is_some(),
            self.batch_size.is_some(),
            self.post_batch_size.is_some(),
            self.variant.is_some(),
        ];
        if !present.iter().any(|p| *p) {
            bail!("grid has no axes");
        }
        if let Some(r) = self.lambda2_ratio {
            if self.lambda2.is_some() {
                bail!("grid.lambda2 and grid.lambda2_ratio are mutually exclusive");
            }
            if self.lambda1.is_none() {
                bail!("grid.lambda2_ratio needs grid.lambda1");
            }
            if !(r >= 0.0 && r.is_finite()) {
                bail!("grid.lambda2_ratio must be finite and non-negative");
            }
        }
        let mut out = Vec::new();
        for l1 in axis("lambda1", &self.lambda1)? {
            for l2 in axis("lambda2", &self.lambda2)? {
                let l2 = match (self.lambda2_ratio, l1) {
                    (Some(r), Some(l1)) => Some(r * l1),
                    _ => l2,
                };
                for budget in axis("budget", &self.budget)? {
                    for batch_size in axis("batch_size", &self.batch_size)? {
                        for post_batch_size in axis("post_batch_size", &self.post_batch_size)? {
                            for variant in axis("variant", &self.variant)? {
                                out.push(GridPoint {
                                    lambda1: l1,
                                    lambda2: l2,
                                    budget,
                                    batch_size,
                                    post_batch_size,
                                    variant,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl GridPoint {
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.lambda1 {
            cfg.eng.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.eng.lambda2 = v;
        }
        if let Some(v) = self.budget {
            cfg.budgets = vec![v];
        }
        if let Some(v) = self.batch_size {
            cfg.victim.train.batch_size = Some(v);
        }
        if let Some(v) = self.post_batch_size {
            cfg.post_batch_size = Some(v);
        }
        if let Some(kind) = self.variant {
            let mut attacks = Vec::new();
            for a in &cfg.attacks {
                let a = match a {
                    AttackKind::Eng(_) => AttackKind::Eng(kind),
                    other => *other,
                };
                if !attacks.contains(&a) {
                    attacks.push(a);
                }
            }
            if !attacks.iter().any(|a| matches!(a, AttackKind::Eng(_))) {
                attacks.push(AttackKind::Eng(kind));
            }
            cfg.attacks = attacks;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
