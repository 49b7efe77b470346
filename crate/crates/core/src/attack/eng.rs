use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::objective::{upper_grad, ObjectiveVariant, ScoreKind};
use crate::victims::{train, Batch, TrainConfig, VictimModel};

use super::plan::PoisonPlan;
use super::prox::{clip, cosine_match, norm, shrink, BoxConstraint};

const RESCALE_FLOOR: f64 = 1e-8;

/// How the base ISTA step is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "lowercase")]
pub enum StepRule {
    /// Fixed step length.
    Absolute(f64),
    /// Every iteration starts from the step that moves the largest
    /// coordinate by this fraction of the mean feature range.
    Relative(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngConfig {
    pub variant: ObjectiveVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Attack iterations T.
    pub iterations: usize,
    pub step: StepRule,
    /// Halvings tried before an iteration keeps the current iterate.
    pub max_halvings: u32,
    /// Divide the three terms by their values at Δ⁰.
    pub rescale: bool,
    /// Match only encoder parameters.
    pub encoder_only: bool,
    /// Half-width of the Δ⁰ distribution as a fraction of each feature range.
    pub init_scale: f64,
    /// Length of the θ-space difference used for input-gradient products.
    pub hvp_step: f64,
}

impl Default for EngConfig {
    fn default() -> Self {
        EngConfig {
            variant: ObjectiveVariant::new(ScoreKind::Fld),
            lambda1: 0.0025,
            lambda2: 0.005,
            iterations: 100,
            step: StepRule::Relative(0.05),
            max_halvings: 30,
            rescale: true,
            encoder_only: false,
            init_scale: 0.05,
            hvp_step: 1e-4,
        }
    }
}

impl EngConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("attack iterations must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("elastic-net weights must be non-negative");
        }
        let s = match self.step {
            StepRule::Absolute(v) | StepRule::Relative(v) => v,
        };
        if !(s > 0.0 && s.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.init_scale >= 0.0 && self.hvp_step > 0.0 && self.variant.ridge >= 0.0) {
            return bad("init_scale, hvp_step and ridge must be non-negative (hvp_step positive)");
        }
        Ok(())
    }
}

/// Divisors applied to the matching, L1 and squared-L2 terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub matching: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Rescale {
    pub const IDENTITY: Rescale = Rescale {
        matching: 1.0,
        l1: 1.0,
        l2: 1.0,
    };

    fn snapshot(b: f64, delta: &Matrix) -> Rescale {
        Rescale {
            matching: b.abs() + RESCALE_FLOOR,
            l1: l1(delta) + RESCALE_FLOOR,
            l2: sq(delta) + RESCALE_FLOOR,
        }
    }
}

/// Value of the elastic-net matching objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngTerms {
    /// Cosine matching `B` (unscaled).
    pub matching: f64,
    /// `Σ_p ‖δ_p‖₁` (unscaled).
    pub l1: f64,
    /// `Σ_p ‖δ_p‖²` (unscaled).
    pub l2sq: f64,
    /// `−B/r_B + λ1 ‖Δ‖₁/r_1 + λ2 ‖Δ‖²/r_2`.
    pub total: f64,
}

fn terms(b: f64, delta: &Matrix, lambda1: f64, lambda2: f64, r: &Rescale) -> EngTerms {
    let l1v = l1(delta);
    let l2v = sq(delta);
    EngTerms {
        matching: b,
        l1: l1v,
        l2sq: l2v,
        total: -b / r.matching + lambda1 * l1v / r.l1 + lambda2 * l2v / r.l2,
    }
}

fn l1(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v.abs()).sum()
}

fn sq(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum()
}

/// Work done by a crafting run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub iterations: usize,
    /// θ-gradients of the poison loss.
    pub lower_grad_passes: usize,
    /// Input gradients used by the matching-gradient products.
    pub input_grad_passes: usize,
    /// Shrink-and-clip operations on single coordinates.
    pub prox_ops: usize,
}

/// Lower-level gradient of the poison rows as a function of Δ, matched
/// against a frozen upper-level gradient.
pub(crate) struct GradMatcher<'a> {
    victim: &'a VictimModel,
    x: &'a Matrix,
    a: &'a [usize],
    y: &'a [u8],
    grad_s: Vec<f64>,
    mask: Option<Vec<f64>>,
    signs: Vec<f64>,
    hvp_step: f64,
    pub counts: OpCounts,
}

impl<'a> GradMatcher<'a> {
    pub(crate) fn new(
        victim: &'a VictimModel,
        poison: &'a Dataset,
        grad_upper: &[f64],
        mask: Option<Vec<f64>>,
        hvp_step: f64,
    ) -> Result<Self> {
        if grad_upper.len() != victim.n_params() {
            return Err(Error::ShapeMismatch {
                op: "grad_upper",
                lhs: (1, grad_upper.len()),
                rhs: (1, victim.n_params()),
            });
        }
        let mut grad_s: Vec<f64> = grad_upper.iter().map(|v| -v).collect();
        if let Some(m) = &mask {
            grad_s.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        if norm(&grad_s) < 1e-12 {
            return Err(Error::DegenerateGradient("upper-level gradient vanishes"));
        }
        Ok(GradMatcher {
            victim,
            x: poison.x(),
            a: poison.a(),
            y: poison.y(),
            grad_s,
            mask,
            signs: victim.reversal_signs(),
            hvp_step,
            counts: OpCounts::default(),
        })
    }

    fn batch(&self, delta: &Matrix) -> Result<Batch> {
        Ok(Batch::new(self.x.add(delta)?, self.a.to_vec(), self.y.to_vec()))
    }

    /// Training-direction θ-gradient of the mean poison loss at `x + Δ`.
    pub(crate) fn lower(&mut self, delta: &Matrix) -> Result<Vec<f64>> {
        let batch = self.batch(delta)?;
        let mut g = self.victim.loss_grad_at(self.victim.theta(), &batch, false)?.theta;
        if let Some(m) = &self.mask {
            g.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        self.counts.lower_grad_passes += 1;
        Ok(g)
    }

    pub(crate) fn matching(&self, g: &[f64]) -> Result<f64> {
        cosine_match(&self.grad_s, g)
    }

    /// `∇_Δ B` given `g = lower(Δ)`.
    ///
    /// With `w = ∂B/∂g`, the product `J_gᵀ w` equals the input gradient of
    /// `⟨w, g⟩`, a directional derivative of the loss in θ, taken here as a
    /// central difference of input gradients along `w`.
    pub(crate) fn matching_grad(&mut self, delta: &Matrix, g: &[f64]) -> Result<Matrix> {
        let ns = norm(&self.grad_s);
        let ng = norm(g);
        if ng == 0.0 {
            return Err(Error::DegenerateGradient("lower-level gradient is zero"));
        }
        let b = self.matching(g)?;
        let mut v: Vec<f64> = self
            .grad_s
            .iter()
            .zip(g)
            .map(|(s, gi)| -s / (ns * ng) - b * gi / (ng * ng))
            .collect();
        // g carries reversed discriminator blocks; undo that for the true loss.
        v.iter_mut().zip(&self.signs).for_each(|(w, s)| *w *= s);
        let nv = norm(&v);
        if nv == 0.0 {
            return Ok(Matrix::zeros(delta.rows(), delta.cols()));
        }
        let h = self.hvp_step;
        let theta = self.victim.theta();
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, w)| t + h * w / nv).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, w)| t - h * w / nv).collect();
        let batch = self.batch(delta)?;
        let xp = self
            .victim
            .loss_grad_at(&plus, &batch, true)?
            .x
            .expect("input gradient requested");
        let xm = self
            .victim
            .loss_grad_at(&minus, &batch, true)?
            .x
            .expect("input gradient requested");
        self.counts.input_grad_passes += 2;
        Ok(xp.sub(&xm)?.scale(nv / (2.0 * h)))
    }
}

/// Value of the elastic-net matching objective at `Δ` for poison rows
/// `poison` and upper-level gradient `grad_upper = ∇θU`.
pub fn eng_objective(
    victim: &VictimModel,
    delta: &Matrix,
    poison: &Dataset,
    grad_upper: &[f64],
    lambda1: f64,
    lambda2: f64,
    rescale: &Rescale,
) -> Result<EngTerms> {
    let mut m = GradMatcher::new(victim, poison, grad_upper, None, 1e-4)?;
    let g = m.lower(delta)?;
    let b = m.matching(&g)?;
    Ok(terms(b, delta, lambda1, lambda2, rescale))
}

/// `∇_Δ B` at `Δ` (all parameter blocks).
pub fn matching_gradient(
    victim: &VictimModel,
    delta: &Matrix,
    poison: &Dataset,
    grad_upper: &[f64],
    hvp_step: f64,
) -> Result<Matrix> {
    let mut m = GradMatcher::new(victim, poison, grad_upper, None, hvp_step)?;
    let g = m.lower(delta)?;
    m.matching_grad(delta, &g)
}

/// One proximal step: descend the smooth part, shrink by `alpha · lambda1`,
/// then clip each row `x_p + δ_p` into the box.
pub fn ista_step(
    delta: &Matrix,
    smooth_grad: &Matrix,
    alpha: f64,
    lambda1: f64,
    x: &Matrix,
    bounds: &BoxConstraint,
) -> Result<Matrix> {
    for other in [smooth_grad.shape(), x.shape()] {
        if other != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "ista_step",
                lhs: delta.shape(),
                rhs: other,
            });
        }
    }
    if bounds.dim() != delta.cols() {
        return Err(Error::ShapeMismatch {
            op: "ista_step box",
            lhs: delta.shape(),
            rhs: (1, bounds.dim()),
        });
    }
    let thr = alpha * lambda1;
    let mut out = Matrix::zeros(delta.rows(), delta.cols());
    for p in 0..delta.rows() {
        let (d, g, xr) = (delta.row(p), smooth_grad.row(p), x.row(p));
        for (j, o) in out.row_mut(p).iter_mut().enumerate() {
            *o = clip(shrink(d[j] - alpha * g[j], thr), xr[j], bounds, j);
        }
    }
    Ok(out)
}

/// Random feasible start: uniform in `±init_scale · range` per coordinate,
/// clipped into the box.
pub fn initial_delta(x: &Matrix, bounds: &BoxConstraint, init_scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Matrix::zeros(x.rows(), x.cols());
    for p in 0..x.rows() {
        let xr = x.row(p);
        for (j, v) in d.row_mut(p).iter_mut().enumerate() {
            let half = init_scale * bounds.width(j);
            let raw = if half > 0.0 {
                rng.random_range(-half..=half)
            } else {
                0.0
            };
            *v = clip(raw, xr[j], bounds, j);
        }
    }
    d
}

/// Pretrains `victim` for `pretrain.epochs` (E) on the unperturbed training
/// set, then crafts perturbations for `poison_rows` (positions in `training`).
pub fn craft_eng(
    victim: &mut VictimModel,
    training: &Dataset,
    poison_rows: &[usize],
    target: &Dataset,
    cfg: &EngConfig,
    pretrain: &TrainConfig,
    seed: u64,
) -> Result<PoisonPlan> {
    cfg.validate()?;
    train(victim, training, pretrain)?;
    craft_on_pretrained(victim, training, poison_rows, target, cfg, seed)
}

/// Crafting loop on an already pretrained victim.
pub fn craft_on_pretrained(
    victim: &VictimModel,
    training: &Dataset,
    poison_rows: &[usize],
    target: &Dataset,
    cfg: &EngConfig,
    seed: u64,
) -> Result<PoisonPlan> {
    cfg.validate()?;
    let mut is_poison = vec![false; training.len()];
    for &r in poison_rows {
        if r >= training.len() || is_poison[r] {
            return Err(Error::InvalidConfig(format!("poison row {r} out of range or repeated")));
        }
        is_poison[r] = true;
    }
    let clean: Vec<usize> = (0..training.len()).filter(|&i| !is_poison[i]).collect();
    let bounds = BoxConstraint::from_rows(&training.x().select_rows(&clean))?;
    let poison = training.subset(poison_rows);
    let (p, m) = (poison.len(), training.n_features());
    if p == 0 {
        return Ok(PoisonPlan::zero(poison_rows.to_vec(), m, bounds));
    }

    let up = upper_grad(victim, target, cfg.variant)?;
    let mask = cfg.encoder_only.then(|| victim.encoder_mask());
    let mut matcher = GradMatcher::new(victim, &poison, &up.grad, mask, cfg.hvp_step)?;

    let x = poison.x();
    let mut delta = initial_delta(x, &bounds, cfg.init_scale, seed);
    let mut g = matcher.lower(&delta)?;
    let b0 = matcher.matching(&g)?;
    let rescale = if cfg.rescale {
        Rescale::snapshot(b0, &delta)
    } else {
        Rescale::IDENTITY
    };
    let (lam1, lam2) = (cfg.lambda1 / rescale.l1, cfg.lambda2 / rescale.l2);
    let mut current = terms(b0, &delta, cfg.lambda1, cfg.lambda2, &rescale);
    let mut trace = vec![current.total];
    let mut matching = vec![b0];
    let mut base_step = None;

    for _ in 0..cfg.iterations {
        matcher.counts.iterations += 1;
        let gb = matcher.matching_grad(&delta, &g)?;
        let mut smooth = gb.scale(-1.0 / rescale.matching);
        smooth.axpy(2.0 * lam2, &delta);
        let alpha0 = match cfg.step {
            StepRule::Absolute(a) => a,
            StepRule::Relative(f) => {
                let gmax = smooth.max_abs();
                if gmax > 0.0 {
                    f * bounds.mean_width() / gmax
                } else {
                    f
                }
            }
        };
        base_step.get_or_insert(alpha0);
        let mut alpha = alpha0;
        for _ in 0..=cfg.max_halvings {
            let cand = ista_step(&delta, &smooth, alpha, lam1, x, &bounds)?;
            matcher.counts.prox_ops += p * m;
            let gc = matcher.lower(&cand)?;
            if let Ok(bc) = matcher.matching(&gc) {
                let tc = terms(bc, &cand, cfg.lambda1, cfg.lambda2, &rescale);
                if tc.total <= current.total {
                    delta = cand;
                    g = gc;
                    current = tc;
                    break;
                }
            }
            alpha *= 0.5;
        }
        trace.push(current.total);
        matching.push(current.matching);
    }

    Ok(PoisonPlan {
        rows: poison_rows.to_vec(),
        delta,
        bounds,
        trace,
        matching,
        base_step: base_step.unwrap_or(0.0),
        rescale,
        counts: matcher.counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ista_fixed_point_and_boundary() {
        let b = BoxConstraint::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0, 0.5]]);
        let d = Matrix::from_rows(&[vec![0.2, -0.1]]);
        let z = Matrix::zeros(1, 2);
        assert_eq!(ista_step(&d, &z, 0.7, 0.0, &x, &b).unwrap(), d);
        let g = Matrix::from_rows(&[vec![-10.0, -10.0]]);
        let out = ista_step(&d, &g, 1.0, 0.0, &x, &b).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.5]);
    }

    #[test]
    fn initial_delta_is_feasible_and_seeded() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.2]]);
        let b = BoxConstraint::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = initial_delta(&x, &b, 0.5, 3);
        for p in 0..2 {
            let row: Vec<f64> = x.row(p).iter().zip(d.row(p)).map(|(a, b)| a + b).collect();
            assert!(b.contains(&row));
        }
        assert_eq!(d, initial_delta(&x, &b, 0.5, 3));
    }

    #[test]
    fn config_rejects_zero_iterations() {
        let cfg = EngConfig {
            iterations: 0,
            ..EngConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
