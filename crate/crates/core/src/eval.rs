//! Attack-effect measurement on representations.

use serde::{Deserialize, Serialize};

use crate::attack::PlanNorms;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::objective::{multiclass_score, ObjectiveVariant, ScoreKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iter: usize,
    /// Stop once the projected-gradient norm falls below this.
    pub tol: f64,
    /// Bound on the Euclidean norm of the weights (bias excluded).
    pub weight_cap: f64,
    /// Decision threshold for the label probe.
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iter: 5000,
            tol: 1e-6,
            weight_cap: 1e3,
            threshold: 0.5,
        }
    }
}

/// Logistic (two classes) or softmax (more) model over representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    /// `d × 1` for two classes, `d × K` otherwise.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Mean cross-entropy on the training set (nats).
    pub loss: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters stacked as `(d + 1) × C`, last row the bias.
struct Params {
    w: Matrix,
}

impl Params {
    fn logits(&self, z: &Matrix, i: usize, out: &mut [f64]) {
        let d = z.cols();
        let zi = z.row(i);
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = self.w[(d, c)];
            for j in 0..d {
                s += zi[j] * self.w[(j, c)];
            }
            *o = s;
        }
    }
}

/// Mean cross-entropy and its gradient.
fn ce_and_grad(p: &Params, z: &Matrix, t: &[usize], want_grad: bool) -> (f64, Matrix) {
    let (n, d) = z.shape();
    let cols = p.w.cols();
    let mut g = Matrix::zeros(d + 1, cols);
    let mut loss = 0.0;
    let mut logit = vec![0.0; cols];
    let mut resid = vec![0.0; cols];
    for i in 0..n {
        p.logits(z, i, &mut logit);
        if cols == 1 {
            let yi = t[i] as f64;
            loss += softplus(logit[0]) - yi * logit[0];
            resid[0] = sigmoid(logit[0]) - yi;
        } else {
            let lse = log_sum_exp(&logit);
            loss += lse - logit[t[i]];
            for c in 0..cols {
                resid[c] = (logit[c] - lse).exp() - if c == t[i] { 1.0 } else { 0.0 };
            }
        }
        if want_grad {
            let zi = z.row(i);
            for c in 0..cols {
                let r = resid[c];
                for j in 0..d {
                    g.data_mut()[j * cols + c] += r * zi[j];
                }
                g.data_mut()[d * cols + c] += r;
            }
        }
    }
    (loss / n as f64, g.scale(1.0 / n as f64))
}

fn project(w: &mut Matrix, cap: f64) {
    let d = w.rows() - 1;
    let cols = w.cols();
    let nrm = w.data()[..d * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
    if nrm > cap {
        let s = cap / nrm;
        w.data_mut()[..d * cols].iter_mut().for_each(|v| *v *= s);
    }
}

/// Largest eigenvalue of `[Z 1]ᵀ[Z 1] / n` by power iteration.
fn gram_top_eigen(z: &Matrix) -> f64 {
    let (n, d) = z.shape();
    let mut gram = Matrix::zeros(d + 1, d + 1);
    for i in 0..n {
        let zi = z.row(i);
        for a in 0..=d {
            let va = if a < d { zi[a] } else { 1.0 };
            for b in 0..=d {
                let vb = if b < d { zi[b] } else { 1.0 };
                gram.data_mut()[a * (d + 1) + b] += va * vb;
            }
        }
    }
    let gram = gram.scale(1.0 / n as f64);
    let mut v = vec![1.0; d + 1];
    let mut lam = 0.0;
    for _ in 0..200 {
        let mut nv = vec![0.0; d + 1];
        for a in 0..=d {
            nv[a] = (0..=d).map(|b| gram[(a, b)] * v[b]).sum();
        }
        let nrm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm == 0.0 {
            return 0.0;
        }
        let new_lam = nrm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = nv.into_iter().map(|x| x / nrm).collect();
        if (new_lam - lam).abs() <= 1e-12 * new_lam {
            lam = new_lam;
            break;
        }
        lam = new_lam;
    }
    lam
}

/// Fits a capped logistic/softmax probe by accelerated projected gradient
/// descent with adaptive restart.
pub fn fit_probe(z: &Matrix, targets: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeClassifier> {
    let (n, d) = z.shape();
    if n == 0 || targets.len() != n {
        return Err(Error::InvalidConfig(format!(
            "probe needs one target per row ({} vs {n})",
            targets.len()
        )));
    }
    if classes < 2 || targets.iter().any(|&t| t >= classes) {
        return Err(Error::InvalidConfig(format!("probe targets must lie in 0..{classes}")));
    }
    let cols = if classes == 2 { 1 } else { classes };
    // Lipschitz bound of the mean cross-entropy gradient.
    let curvature = if cols == 1 { 0.25 } else { 0.5 };
    let lip = (curvature * gram_top_eigen(z) * 1.01).max(1e-12);
    let step = 1.0 / lip;

    let mut x = Params {
        w: Matrix::zeros(d + 1, cols),
    };
    let mut yv = x.w.clone();
    let mut t = 1.0f64;
    let mut prev_loss = f64::INFINITY;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let py = Params { w: yv.clone() };
        let (_, g) = ce_and_grad(&py, z, targets, true);
        let mut next = yv.clone();
        next.axpy(-step, &g);
        project(&mut next, cfg.weight_cap);
        let np = Params { w: next };
        let (loss, gx) = ce_and_grad(&np, z, targets, true);
        // projected-gradient norm at the new iterate
        let mut probe = np.w.clone();
        probe.axpy(-step, &gx);
        project(&mut probe, cfg.weight_cap);
        grad_norm = np.w.sub(&probe)?.frobenius_norm() / step;
        if grad_norm < cfg.tol {
            x = np;
            converged = true;
            break;
        }
        if loss > prev_loss {
            // restart momentum from the last iterate
            t = 1.0;
            yv = x.w.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        let mut mom = np.w.sub(&x.w)?;
        mom = mom.scale(beta);
        yv = np.w.add(&mom)?;
        x = np;
        t = t_next;
        prev_loss = loss;
    }
    let (loss, _) = ce_and_grad(&x, z, targets, false);
    let weights = Matrix::from_vec(d, cols, x.w.data()[..d * cols].to_vec());
    let bias = x.w.row(d).to_vec();
    Ok(ProbeClassifier {
        weights,
        bias,
        classes,
        iterations,
        grad_norm,
        converged,
        loss,
    })
}

impl ProbeClassifier {
    /// Class probabilities, one row per input row.
    pub fn predict_proba(&self, z: &Matrix) -> Matrix {
        let d = self.weights.rows();
        let cols = self.weights.cols();
        let mut w = Matrix::zeros(d + 1, cols);
        w.data_mut()[..d * cols].copy_from_slice(self.weights.data());
        w.row_mut(d).copy_from_slice(&self.bias);
        let p = Params { w };
        let k = self.classes;
        let mut out = Matrix::zeros(z.rows(), k);
        let mut logit = vec![0.0; cols];
        for i in 0..z.rows() {
            p.logits(z, i, &mut logit);
            let row = out.row_mut(i);
            if cols == 1 {
                let q = sigmoid(logit[0]);
                row[0] = 1.0 - q;
                row[1] = q;
            } else {
                let lse = log_sum_exp(&logit);
                for c in 0..k {
                    row[c] = (logit[c] - lse).exp();
                }
            }
        }
        out
    }

    /// Mean cross-entropy on `(z, targets)`.
    pub fn cross_entropy(&self, z: &Matrix, targets: &[usize]) -> f64 {
        let p = self.predict_proba(z);
        let n = z.rows();
        (0..n)
            .map(|i| -p[(i, targets[i])].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64
    }
}

fn require_groups(a: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for &v in a {
        if v >= k {
            return Err(Error::InvalidConfig(format!("sensitive value {v} outside 0..{k}")));
        }
        seen[v] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(g) => Err(Error::MissingGroup(g)),
        None => Ok(()),
    }
}

/// Cross-entropy of the converged sensitive-attribute probe on its own
/// training set (binary: BCE; `k > 2`: softmax cross-entropy).
pub fn bce_probe(z: &Matrix, a: &[usize], k: usize, cfg: &ProbeConfig) -> Result<f64> {
    require_groups(a, k)?;
    Ok(fit_probe(z, a, k, cfg)?.loss)
}

/// `max_g P̂(ŷ=1 | a=g) − min_g P̂(ŷ=1 | a=g)`; for binary `a` the usual
/// absolute difference.
pub fn dp_gap(yhat: &[bool], a: &[usize], k: usize) -> Result<f64> {
    require_groups(a, k)?;
    let mut pos = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&p, &g) in yhat.iter().zip(a) {
        tot[g] += 1;
        pos[g] += p as usize;
    }
    let rates: Vec<f64> = (0..k).map(|g| pos[g] as f64 / tot[g] as f64).collect();
    let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}

fn label_predictions(z: &Matrix, y: &[u8], cfg: &ProbeConfig) -> Result<Vec<bool>> {
    let t: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    if t.iter().all(|&v| v == t[0]) {
        // a single observed class: the fitted probe predicts it everywhere
        return Ok(vec![t[0] == 1; t.len()]);
    }
    let probe = fit_probe(z, &t, 2, cfg)?;
    let p = probe.predict_proba(z);
    Ok((0..z.rows()).map(|i| p[(i, 1)] >= cfg.threshold).collect())
}

/// Demographic-parity gap of a label probe trained on `(z, y)`.
pub fn dp_violation(z: &Matrix, y: &[u8], a: &[usize], k: usize, cfg: &ProbeConfig) -> Result<f64> {
    require_groups(a, k)?;
    let yhat = label_predictions(z, y, cfg)?;
    dp_gap(&yhat, a, k)
}

/// Thresholded accuracy of a label probe trained on `(z, y)`.
pub fn y_accuracy(z: &Matrix, y: &[u8], cfg: &ProbeConfig) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidConfig("accuracy of an empty set".into()));
    }
    let yhat = label_predictions(z, y, cfg)?;
    let hits = yhat.iter().zip(y).filter(|(p, t)| **p == (**t == 1)).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Plug-in entropies in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entropies {
    pub h_a: f64,
    pub h_y: f64,
    pub h_y_given_a: f64,
    pub mi_y_a: f64,
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn entropy_diagnostics(a: &[usize], y: &[u8]) -> Result<Entropies> {
    let n = a.len();
    if n == 0 || y.len() != n {
        return Err(Error::InvalidConfig(
            "entropies need equal-length nonempty a and y".into(),
        ));
    }
    let k = a.iter().max().map_or(0, |m| m + 1);
    let mut ca = vec![0usize; k];
    let mut cy = [0usize; 2];
    let mut joint = vec![[0usize; 2]; k];
    for (&g, &t) in a.iter().zip(y) {
        ca[g] += 1;
        cy[t as usize] += 1;
        joint[g][t as usize] += 1;
    }
    let h_a = entropy(&ca, n);
    let h_y = entropy(&cy, n);
    let h_y_given_a: f64 = (0..k)
        .filter(|&g| ca[g] > 0)
        .map(|g| ca[g] as f64 / n as f64 * entropy(&joint[g], ca[g]))
        .sum();
    Ok(Entropies {
        h_a,
        h_y,
        h_y_given_a,
        mi_y_a: (h_y - h_y_given_a).max(0.0),
    })
}

/// Average ranks (ties share the mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Scores of one representation set under each variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    #[serde(rename = "FLD")]
    pub fld: f64,
    #[serde(rename = "sFLD")]
    pub sfld: f64,
    #[serde(rename = "EUC")]
    pub euc: f64,
}

impl VariantScores {
    pub fn get(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Fld => self.fld,
            ScoreKind::Sfld => self.sfld,
            ScoreKind::Euc => self.euc,
        }
    }

    pub fn compute(z: &Matrix, a: &[usize], k: usize, ridge: f64) -> Result<Self> {
        let s = |kind| multiclass_score(z, a, k, ObjectiveVariant::with_ridge(kind, ridge)).map(|r| r.score);
        Ok(VariantScores {
            fld: s(ScoreKind::Fld)?,
            sfld: s(ScoreKind::Sfld)?,
            euc: s(ScoreKind::Euc)?,
        })
    }

    fn minus(&self, o: &Self) -> Self {
        VariantScores {
            fld: self.fld - o.fld,
            sfld: self.sfld - o.sfld,
            euc: self.euc - o.euc,
        }
    }
}

/// Per-epoch scores against probe cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    /// `−s` per epoch for each variant.
    pub neg_scores: Vec<VariantScores>,
    pub bce: Vec<f64>,
    /// Rank correlation of `−s` with BCE; `None` flags a degenerate series.
    pub rho: [Option<f64>; 3],
}

impl FidelityCurve {
    pub fn rho_for(&self, kind: ScoreKind) -> Option<f64> {
        let i = ScoreKind::ALL.iter().position(|k| *k == kind).expect("known kind");
        self.rho[i]
    }
}

pub fn fidelity_curve(
    snapshots: &[Matrix],
    a: &[usize],
    k: usize,
    ridge: f64,
    cfg: &ProbeConfig,
) -> Result<FidelityCurve> {
    if snapshots.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "fidelity needs at least 5 snapshots, got {}",
            snapshots.len()
        )));
    }
    let mut neg_scores = Vec::with_capacity(snapshots.len());
    let mut bce = Vec::with_capacity(snapshots.len());
    for z in snapshots {
        let s = VariantScores::compute(z, a, k, ridge)?;
        neg_scores.push(VariantScores::default().minus(&s));
        bce.push(bce_probe(z, a, k, cfg)?);
    }
    let rho = ScoreKind::ALL.map(|kind| {
        let series: Vec<f64> = neg_scores.iter().map(|s| s.get(kind)).collect();
        spearman(&series, &bce)
    });
    Ok(FidelityCurve { neg_scores, bce, rho })
}

/// Attacked-minus-control differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlDeltas {
    pub bce_probe: f64,
    pub dp_violation: f64,
    pub y_accuracy: f64,
    pub scores: VariantScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bce_probe: f64,
    pub dp_violation: f64,
    pub y_accuracy: f64,
    pub scores: VariantScores,
    pub entropies: Entropies,
    pub perturbation: Option<PlanNorms>,
    pub deltas: Option<ControlDeltas>,
}

impl EvalReport {
    /// Measures representations `z` of the target rows.
    pub fn evaluate(z: &Matrix, a: &[usize], y: &[u8], k: usize, ridge: f64, cfg: &ProbeConfig) -> Result<Self> {
        let report = EvalReport {
            bce_probe: bce_probe(z, a, k, cfg)?,
            dp_violation: dp_violation(z, y, a, k, cfg)?,
            y_accuracy: y_accuracy(z, y, cfg)?,
            scores: VariantScores::compute(z, a, k, ridge)?,
            entropies: entropy_diagnostics(a, y)?,
            perturbation: None,
            deltas: None,
        };
        let finite = [report.bce_probe, report.dp_violation, report.y_accuracy]
            .iter()
            .chain([report.scores.fld, report.scores.sfld, report.scores.euc].iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite evaluation metric".into()));
        }
        Ok(report)
    }

    pub fn set_control(&mut self, control: &EvalReport) {
        self.deltas = Some(ControlDeltas {
            bce_probe: self.bce_probe - control.bce_probe,
            dp_violation: self.dp_violation - control.dp_violation,
            y_accuracy: self.y_accuracy - control.y_accuracy,
            scores: self.scores.minus(&control.scores),
        });
    }

    /// `control BCE − attacked BCE` (positive when the attack leaks more).
    pub fn bce_decrease(&self) -> Option<f64> {
        self.deltas.map(|d| -d.bce_probe)
    }
}
