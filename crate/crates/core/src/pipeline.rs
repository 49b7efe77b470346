//! One replication of the attack protocol and its paired control.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{craft_anchor, craft_on_pretrained, AnchorKind, EngConfig, PoisonPlan};
use crate::dataio::{split, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{fidelity_curve, EvalReport, FidelityCurve, ProbeConfig};
use crate::objective::{ObjectiveVariant, ScoreKind};
use crate::victims::{build_victim, train, train_with_hook, Arch, TrainConfig, VictimKind, VictimModel};

/// Attack applied between pretraining and continued training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    None,
    Eng(ScoreKind),
    Anchor(AnchorKind),
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Eng(ScoreKind::Fld),
        AttackKind::Eng(ScoreKind::Sfld),
        AttackKind::Eng(ScoreKind::Euc),
        AttackKind::Anchor(AnchorKind::RaaY),
        AttackKind::Anchor(AnchorKind::RaaA),
        AttackKind::Anchor(AnchorKind::NraaY),
        AttackKind::Anchor(AnchorKind::NraaA),
        AttackKind::None,
    ];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::None => f.write_str("none"),
            AttackKind::Eng(k) => write!(f, "ENG-{k}"),
            AttackKind::Anchor(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(AttackKind::None);
        }
        if let Some(v) = s.strip_prefix("ENG-").or_else(|| s.strip_prefix("eng-")) {
            return Ok(AttackKind::Eng(v.parse()?));
        }
        s.parse::<AnchorKind>().map(AttackKind::Anchor).map_err(|_| {
            Error::InvalidConfig(format!(
                "unknown attack `{s}` (expected none, ENG-FLD, ENG-sFLD, ENG-EUC, RAA_y, RAA_a, NRAA_y or NRAA_a)"
            ))
        })
    }
}

impl Serialize for AttackKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything one replication needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub victim: VictimKind,
    pub arch: Arch,
    /// Optimizer settings; `epochs` is the pretraining length E.
    pub train: TrainConfig,
    pub attack: AttackKind,
    /// ENG settings; the variant is taken from `attack`.
    pub eng: EngConfig,
    /// NRAA neighbor radius.
    pub anchor_tau: f64,
    pub budget: f64,
    pub target_frac: f64,
    pub post_epochs: usize,
    /// Batch size for continued training (defaults to `train.batch_size`).
    pub post_batch_size: Option<usize>,
    pub split_seed: u64,
    pub victim_seed: u64,
    pub probe: ProbeConfig,
}

impl PipelineSpec {
    pub fn new(victim: VictimKind, arch: Arch, attack: AttackKind) -> Self {
        PipelineSpec {
            victim,
            arch,
            train: TrainConfig::defaults_for(victim),
            attack,
            eng: EngConfig::default(),
            anchor_tau: 0.0,
            budget: 0.1,
            target_frac: 0.2,
            post_epochs: 20,
            post_batch_size: None,
            split_seed: 1,
            victim_seed: 1,
            probe: ProbeConfig::default(),
        }
    }

    fn eng_config(&self) -> EngConfig {
        let mut cfg = self.eng.clone();
        if let AttackKind::Eng(kind) = self.attack {
            cfg.variant = ObjectiveVariant::with_ridge(kind, self.eng.variant.ridge);
        }
        cfg
    }

    fn post_config(&self) -> TrainConfig {
        let mut tc = self.train.clone();
        tc.epochs = self.post_epochs;
        if let Some(b) = self.post_batch_size {
            tc.batch_size = b;
        }
        tc
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return Err(Error::InvalidConfig(format!("budget {} outside (0, 1)", self.budget)));
        }
        if !(self.target_frac > 0.0 && self.target_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_frac {} outside (0, 1)",
                self.target_frac
            )));
        }
        self.eng_config().validate()
    }
}

/// The pieces shared by an attacked run and its control.
#[derive(Clone)]
pub struct Prepared {
    pub split: Split,
    pub training: Dataset,
    pub target: Dataset,
    /// Positions of the poison rows inside `training`.
    pub poison_rows: Vec<usize>,
    pub pretrained: VictimModel,
}

fn split_parts(data: &Dataset, spec: &PipelineSpec) -> Result<(Split, Dataset, Dataset, Vec<usize>)> {
    spec.validate()?;
    let sp = split(data.len(), spec.target_frac, spec.budget, spec.split_seed)?;
    let training_idx = sp.training_idx();
    let training = data.subset(&training_idx);
    let target = data.subset(&sp.target_idx);
    let poison_rows: Vec<usize> = sp
        .poison_idx
        .iter()
        .map(|i| training_idx.binary_search(i).expect("poison rows are training rows"))
        .collect();
    Ok((sp, training, target, poison_rows))
}

/// Splits the data and pretrains the victim on the unperturbed training rows.
pub fn prepare(data: &Dataset, spec: &PipelineSpec) -> Result<Prepared> {
    let (split, training, target, poison_rows) = split_parts(data, spec)?;
    let mut victim = build_victim(spec.victim, spec.arch.clone(), spec.victim_seed)?;
    train(&mut victim, &training, &spec.train)?;
    Ok(Prepared {
        split,
        training,
        target,
        poison_rows,
        pretrained: victim,
    })
}

impl Prepared {
    /// The same replication at `spec.budget`. Target and training rows do
    /// not depend on the budget, so the pretrained victim is kept.
    pub fn with_budget(&self, data: &Dataset, spec: &PipelineSpec) -> Result<Prepared> {
        let (split, training, target, poison_rows) = split_parts(data, spec)?;
        if split.target_idx != self.split.target_idx {
            return Err(Error::InvalidConfig("budget change altered the target rows".into()));
        }
        Ok(Prepared {
            split,
            training,
            target,
            poison_rows,
            pretrained: self.pretrained.clone(),
        })
    }
}

/// Result of the attacked branch.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub report: EvalReport,
    pub plan: Option<PoisonPlan>,
    /// Anchor pairs used per epoch (anchor attacks only).
    pub anchors: Vec<[usize; 2]>,
}

fn evaluate(victim: &VictimModel, target: &Dataset, spec: &PipelineSpec) -> Result<EvalReport> {
    let z = victim.encode(target.x())?;
    EvalReport::evaluate(
        &z,
        target.a(),
        target.y(),
        target.sensitive_classes(),
        spec.eng.variant.ridge,
        &spec.probe,
    )
}

/// Continues training on clean data for the post-poison epochs and evaluates.
pub fn run_control(prep: &Prepared, spec: &PipelineSpec) -> Result<EvalReport> {
    let mut victim = prep.pretrained.clone();
    train(&mut victim, &prep.training, &spec.post_config())?;
    evaluate(&victim, &prep.target, spec)
}

/// Crafts the configured attack, continues training on the poisoned rows
/// and evaluates; `control` fills the report's deltas.
pub fn run_attack(prep: &Prepared, spec: &PipelineSpec, control: &EvalReport) -> Result<AttackOutcome> {
    let post = spec.post_config();
    let mut victim = prep.pretrained.clone();
    let mut plan = None;
    let mut anchors = Vec::new();
    match spec.attack {
        AttackKind::None => {
            train(&mut victim, &prep.training, &post)?;
        }
        AttackKind::Eng(_) => {
            let cfg = spec.eng_config();
            let p = craft_on_pretrained(
                &victim,
                &prep.training,
                &prep.poison_rows,
                &prep.target,
                &cfg,
                spec.split_seed,
            )?;
            let poisoned = p.apply(&prep.training)?;
            train(&mut victim, &poisoned, &post)?;
            plan = Some(p);
        }
        AttackKind::Anchor(kind) => {
            let keep: Vec<usize> = {
                let mut is_p = vec![false; prep.training.len()];
                prep.poison_rows.iter().for_each(|&r| is_p[r] = true);
                (0..prep.training.len()).filter(|&i| !is_p[i]).collect()
            };
            let base = prep.training.subset(&keep);
            let pool = &prep.training;
            let (mut data, mut attack) = craft_anchor(
                kind,
                pool,
                &base,
                prep.poison_rows.len(),
                spec.anchor_tau,
                spec.split_seed,
            )?;
            let last = post.epochs.saturating_sub(1);
            train_with_hook(&mut victim, &mut data, &post, |epoch, _, d| {
                if epoch == last {
                    return Ok(None);
                }
                attack.reselect();
                *d = attack.poisoned(&base, pool)?;
                Ok(None)
            })?;
            anchors = attack.history().to_vec();
        }
    }
    let mut report = evaluate(&victim, &prep.target, spec)?;
    if let Some(p) = &plan {
        report.perturbation = Some(p.norms());
    }
    report.set_control(control);
    Ok(AttackOutcome { report, plan, anchors })
}

/// Attacked and control reports for one replication.
pub fn run_pipeline(data: &Dataset, spec: &PipelineSpec) -> Result<(AttackOutcome, EvalReport)> {
    let prep = prepare(data, spec)?;
    let control = run_control(&prep, spec)?;
    let outcome = run_attack(&prep, spec, &control)?;
    Ok((outcome, control))
}

/// Trains a fresh victim on the clean training rows of `spec`'s split for
/// `train.epochs`, encoding the target rows after every epoch.
pub fn clean_trajectory(data: &Dataset, spec: &PipelineSpec) -> Result<(Vec<crate::ndcore::Matrix>, Dataset)> {
    let sp = split(data.len(), spec.target_frac, spec.budget, spec.split_seed)?;
    let mut training = data.subset(&sp.training_idx());
    let target = data.subset(&sp.target_idx);
    let mut victim = build_victim(spec.victim, spec.arch.clone(), spec.victim_seed)?;
    let log = train_with_hook(&mut victim, &mut training, &spec.train, |_, v, _| {
        Ok(Some(v.encode(target.x())?))
    })?;
    Ok((log.snapshots, target))
}

/// Rank agreement of each score variant with the probe along a clean trajectory.
pub fn fidelity_run(data: &Dataset, spec: &PipelineSpec) -> Result<FidelityCurve> {
    let (snaps, target) = clean_trajectory(data, spec)?;
    fidelity_curve(
        &snaps,
        target.a(),
        target.sensitive_classes(),
        spec.eng.variant.ridge,
        &spec.probe,
    )
}
