//! Fisher-discriminant separability of the sensitive attribute in
//! representation space, and its gradient through the encoder.
//!
//! `s = (μ0 − μ1)ᵀ (S0 + S1 + cI)⁻¹ (μ0 − μ1)` with biased (1/n_g) group
//! covariances. The attack minimizes `U = −s`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Tape, Var};
use crate::victims::VictimModel;

pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Full regularized Fisher score.
    #[serde(rename = "FLD")]
    Fld,
    /// Same value; scatters are treated as constants when differentiating.
    #[serde(rename = "sFLD")]
    Sfld,
    /// Scatter replaced by the identity: squared distance of group means.
    #[serde(rename = "EUC")]
    Euc,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Fld, ScoreKind::Sfld, ScoreKind::Euc];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Fld => "FLD",
            ScoreKind::Sfld => "sFLD",
            ScoreKind::Euc => "EUC",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FLD" => Ok(ScoreKind::Fld),
            "SFLD" => Ok(ScoreKind::Sfld),
            "EUC" => Ok(ScoreKind::Euc),
            other => Err(Error::InvalidConfig(format!("unknown score variant `{other}`"))),
        }
    }
}

/// Score variant with its ridge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVariant {
    pub kind: ScoreKind,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl ObjectiveVariant {
    pub fn new(kind: ScoreKind) -> Self {
        ObjectiveVariant {
            kind,
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn with_ridge(kind: ScoreKind, ridge: f64) -> Self {
        ObjectiveVariant { kind, ridge }
    }
}

/// Value and geometry of the binary score.
#[derive(Clone, Debug)]
pub struct FldResult {
    pub score: f64,
    /// Unit vector along `(S0 + S1 + cI)⁻¹ (μ0 − μ1)`.
    pub direction: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// `S0 + S1 + cI` (identity for EUC).
    pub scatter: Matrix,
}

impl FldResult {
    /// One-dimensional separation along `v` under the same regularized scatter:
    /// `(vᵀμ0 − vᵀμ1)² / vᵀ(S0 + S1 + cI)v`.
    pub fn separation(&self, v: &[f64]) -> f64 {
        let num: f64 = v
            .iter()
            .zip(self.mu0.iter().zip(&self.mu1))
            .map(|(vi, (p, q))| vi * (p - q))
            .sum();
        let d = v.len();
        let mut den = 0.0;
        for i in 0..d {
            for j in 0..d {
                den += v[i] * self.scatter[(i, j)] * v[j];
            }
        }
        num * num / den
    }
}

fn group_indices(a: &[usize], positive: usize) -> (Vec<usize>, Vec<usize>) {
    let mut g0 = Vec::new();
    let mut g1 = Vec::new();
    for (i, &v) in a.iter().enumerate() {
        if v == positive {
            g1.push(i);
        } else {
            g0.push(i);
        }
    }
    (g0, g1)
}

struct TapeScore {
    score: Var,
    mu0: Var,
    mu1: Var,
    scatter: Option<Var>,
    solution: Option<Var>,
}

/// Biased scatter `cᵀc / n` of a group's centred rows.
fn scatter_on_tape(t: &mut Tape, rows: Var, mean: Var, n: usize) -> Result<Var> {
    let centred = t.sub_row(rows, mean)?;
    let ct = t.transpose(centred);
    let s = t.matmul(ct, centred)?;
    Ok(t.scale(s, 1.0 / n as f64))
}

/// Records the binary score for groups `idx0` / `idx1` of `z`.
fn score_on_tape(t: &mut Tape, z: Var, idx0: &[usize], idx1: &[usize], variant: ObjectiveVariant) -> Result<TapeScore> {
    let d = t.shape(z).1;
    let z0 = t.select_rows(z, idx0);
    let z1 = t.select_rows(z, idx1);
    let mu0 = t.mean_rows(z0);
    let mu1 = t.mean_rows(z1);
    let diff = t.sub(mu0, mu1)?;
    if variant.kind == ScoreKind::Euc {
        let sq = t.square(diff);
        let score = t.sum(sq);
        return Ok(TapeScore {
            score,
            mu0,
            mu1,
            scatter: None,
            solution: None,
        });
    }
    let (s0, s1) = if variant.kind == ScoreKind::Sfld {
        let z0c = t.detach(z0);
        let z1c = t.detach(z1);
        let m0c = t.detach(mu0);
        let m1c = t.detach(mu1);
        (
            scatter_on_tape(t, z0c, m0c, idx0.len())?,
            scatter_on_tape(t, z1c, m1c, idx1.len())?,
        )
    } else {
        (
            scatter_on_tape(t, z0, mu0, idx0.len())?,
            scatter_on_tape(t, z1, mu1, idx1.len())?,
        )
    };
    let pooled = t.add(s0, s1)?;
    let ridge = t.constant(Matrix::identity(d).scale(variant.ridge));
    let reg = t.add(pooled, ridge)?;
    let col = t.transpose(diff);
    let sol = t.solve(reg, col)?;
    let score = t.matmul(diff, sol)?;
    Ok(TapeScore {
        score,
        mu0,
        mu1,
        scatter: Some(reg),
        solution: Some(sol),
    })
}

fn check_binary(a: &[usize], n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} sensitive values for {n} rows",
            a.len()
        )));
    }
    if a.iter().any(|&v| v > 1) {
        return Err(Error::InvalidConfig("binary score needs a in {0, 1}".into()));
    }
    let (g0, g1) = group_indices(a, 1);
    if g0.is_empty() {
        return Err(Error::MissingGroup(0));
    }
    if g1.is_empty() {
        return Err(Error::MissingGroup(1));
    }
    Ok((g0, g1))
}

/// Binary score of representations `z` for sensitive values `a ∈ {0,1}`.
pub fn fld_score(z: &Matrix, a: &[usize], variant: ObjectiveVariant) -> Result<FldResult> {
    let (g0, g1) = check_binary(a, z.rows())?;
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let ts = score_on_tape(&mut t, zv, &g0, &g1, variant)?;
    let mu0 = t.value(ts.mu0).data().to_vec();
    let mu1 = t.value(ts.mu1).data().to_vec();
    let d = z.cols();
    let (scatter, raw_dir) = match (ts.scatter, ts.solution) {
        (Some(s), Some(v)) => (t.value(s).clone(), t.value(v).data().to_vec()),
        _ => (Matrix::identity(d), mu0.iter().zip(&mu1).map(|(p, q)| p - q).collect()),
    };
    let norm = raw_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction = if norm > 0.0 {
        raw_dir.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; d]
    };
    Ok(FldResult {
        score: t.value(ts.score).item(),
        direction,
        mu0,
        mu1,
        scatter,
    })
}

/// Multi-class score: mean over classes of the one-vs-rest binary score.
#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassScore {
    pub score: f64,
    /// Classes absent from `a` (each contributed 0).
    pub empty_classes: Vec<usize>,
}

fn one_vs_rest(a: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    group_indices(a, k)
}

/// `(1/K) Σ_k s(z, 1[a = k])`; classes with no members (or no
/// complement) contribute 0 and are flagged.
pub fn multiclass_score(z: &Matrix, a: &[usize], k: usize, variant: ObjectiveVariant) -> Result<MulticlassScore> {
    if k < 2 || a.iter().any(|&v| v >= k) {
        return Err(Error::InvalidConfig(format!("sensitive values must lie in 0..{k}")));
    }
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let (s, empty) = multiclass_on_tape(&mut t, zv, a, k, variant)?;
    Ok(MulticlassScore {
        score: t.value(s).item(),
        empty_classes: empty,
    })
}

fn multiclass_on_tape(
    t: &mut Tape,
    z: Var,
    a: &[usize],
    k: usize,
    variant: ObjectiveVariant,
) -> Result<(Var, Vec<usize>)> {
    let mut empty = Vec::new();
    let mut total: Option<Var> = None;
    for class in 0..k {
        let (rest, members) = one_vs_rest(a, class);
        if rest.is_empty() || members.is_empty() {
            empty.push(class);
            continue;
        }
        // Class k plays the role of group 0 so that K = 2 reproduces the binary orientation.
        let ts = score_on_tape(t, z, &members, &rest, variant)?;
        total = Some(match total {
            Some(acc) => t.add(acc, ts.score)?,
            None => ts.score,
        });
    }
    let sum = match total {
        Some(v) => v,
        None => t.constant(Matrix::scalar(0.0)),
    };
    Ok((t.scale(sum, 1.0 / k as f64), empty))
}

/// Records the score of `z` against `a` (binary when `k == 2`).
pub(crate) fn score_var(t: &mut Tape, z: Var, a: &[usize], k: usize, variant: ObjectiveVariant) -> Result<Var> {
    if k == 2 {
        let (g0, g1) = check_binary(a, t.shape(z).0)?;
        Ok(score_on_tape(t, z, &g0, &g1, variant)?.score)
    } else {
        Ok(multiclass_on_tape(t, z, a, k, variant)?.0)
    }
}

/// Upper-level score and its gradient over θ.
#[derive(Clone, Debug)]
pub struct UpperGrad {
    /// Score `s` at the current θ.
    pub score: f64,
    /// `∇θ U = −∇θ s`, flattened in block order (zero outside the encoder).
    pub grad: Vec<f64>,
}

/// `∇θ U` for `U = −s(encode(X_target))`.
pub fn upper_grad(victim: &VictimModel, target: &Dataset, variant: ObjectiveVariant) -> Result<UpperGrad> {
    let mut t = Tape::new();
    let x = t.constant(target.x().clone());
    let (z, leaves) = victim.encode_on_tape(&mut t, x)?;
    let s = score_var(&mut t, z, target.a(), target.sensitive_classes(), variant)?;
    let score = t.value(s).item();
    let u = t.scale(s, -1.0);
    let mut g = t.backward(u)?;
    let mut flat = vec![0.0; victim.n_params()];
    for (b, &leaf) in victim.blocks().iter().zip(&leaves) {
        flat[b.range()].copy_from_slice(g.take(leaf).data());
    }
    Ok(UpperGrad { score, grad: flat })
}

/// Gradient of the score with respect to the representations themselves.
pub fn score_grad_z(z: &Matrix, a: &[usize], k: usize, variant: ObjectiveVariant) -> Result<(f64, Matrix)> {
    let mut t = Tape::new();
    let zv = t.leaf(z.clone());
    let s = score_var(&mut t, zv, a, k, variant)?;
    let g = t.backward(s)?;
    Ok((t.value(s).item(), g.wrt(zv)))
}
