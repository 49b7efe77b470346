//! Minimal poisoning ratio: the bound, its ingredients on a real victim,
//! and a Monte Carlo check of the sufficient-descent setting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Hypergeometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::objective::{upper_grad, ObjectiveVariant};
use crate::victims::{Batch, VictimModel};

pub const DEFAULT_C_DESCENT: f64 = 1e-4;

/// Ingredients of the poisoning-ratio bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryEstimates {
    /// Smoothness constant C.
    pub smoothness: f64,
    /// Clean per-sample gradient norm bound σ.
    pub sigma: f64,
    /// ‖∇θU‖.
    pub upper_grad_norm: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub c_descent: f64,
    /// ‖mean clean gradient‖; small against σ when the victim is well trained.
    #[serde(default)]
    pub mean_clean_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinRatio {
    pub ratio: f64,
    /// The bound is at least 1: no budget satisfies it.
    pub infeasible: bool,
}

/// `c + αCσ² / (2n‖∇U‖²) + αC/2`.
pub fn min_poison_ratio(est: &TheoryEstimates) -> Result<MinRatio> {
    if est.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let g2 = est.upper_grad_norm * est.upper_grad_norm;
    if g2 == 0.0 {
        return Err(Error::DegenerateGradient("upper-level gradient is zero"));
    }
    let ac = est.lr * est.smoothness;
    let ratio = est.c_descent + ac * est.sigma * est.sigma / (2.0 * est.batch_size as f64 * g2) + ac / 2.0;
    Ok(MinRatio {
        ratio,
        infeasible: ratio >= 1.0,
    })
}

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Running maximum of power-refined secant slopes `‖∇f(θ₁) − ∇f(θ₂)‖ / ‖θ₁ − θ₂‖`
/// around `center`; entry `i` is the estimate from the first `i + 1` samples.
pub fn secant_smoothness<F>(grad: F, center: &[f64], samples: usize, radius: f64, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    const REFINE: usize = 3;
    let dim = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let shift = unit_normal(&mut rng, dim);
        let r: f64 = rng.random_range(0.0..=1.0);
        let t1: Vec<f64> = center.iter().zip(&shift).map(|(c, s)| c + r * radius * s).collect();
        let g1 = grad(&t1)?;
        let mut v = unit_normal(&mut rng, dim);
        for _ in 0..REFINE {
            let t2: Vec<f64> = t1.iter().zip(&v).map(|(t, d)| t + radius * d).collect();
            let g2 = grad(&t2)?;
            let diff: Vec<f64> = g2.iter().zip(&g1).map(|(a, b)| a - b).collect();
            let dn = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            let slope = dn / dist(&t1, &t2);
            if slope.is_finite() {
                best = best.max(slope);
            }
            if dn == 0.0 {
                break;
            }
            v = diff.into_iter().map(|x| x / dn).collect();
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSpec {
    /// Secant samples, also the number of clean rows used for σ.
    pub samples: usize,
    /// Clean rows in the loss used for secants.
    pub rows: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Estimates C, σ and ‖∇θU‖ on a pretrained victim.
pub fn estimate_constants(
    victim: &VictimModel,
    clean: &Dataset,
    target: &Dataset,
    variant: ObjectiveVariant,
    spec: &EstimateSpec,
) -> Result<TheoryEstimates> {
    if clean.is_empty() || spec.samples == 0 {
        return Err(Error::InvalidConfig("estimation needs clean rows and samples".into()));
    }
    let up = upper_grad(victim, target, variant)?;
    let gnorm = up.grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx: Vec<usize> = (0..clean.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let sub = clean.subset(&idx[..spec.rows.clamp(1, clean.len())]);
    let batch = Batch::new(sub.x().clone(), sub.a().to_vec(), sub.y().to_vec());

    let per_rows = spec.samples.min(sub.len());
    let mut sigma = 0.0f64;
    let mut mean = vec![0.0; victim.n_params()];
    for i in 0..per_rows {
        let one = Batch::new(sub.x().select_rows(&[i]), vec![sub.a()[i]], vec![sub.y()[i]]);
        let g = victim.lower_level_grad(&one)?;
        sigma = sigma.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v / per_rows as f64);
    }

    let theta = victim.theta().to_vec();
    let rms = (theta.iter().map(|t| t * t).sum::<f64>() / theta.len() as f64).sqrt();
    let radius = 1e-2 * rms.max(1e-2);
    let secants = secant_smoothness(
        |t| Ok(victim.loss_grad_at(t, &batch, false)?.theta),
        &theta,
        spec.samples,
        radius,
        spec.seed ^ 0x5ec4,
    )?;
    Ok(TheoryEstimates {
        smoothness: *secants.last().expect("samples > 0"),
        sigma,
        upper_grad_norm: gnorm,
        lr: spec.lr,
        batch_size: spec.batch_size,
        c_descent: DEFAULT_C_DESCENT,
        mean_clean_grad_norm: mean.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dim: usize,
    pub lr: f64,
    /// C in U(θ) = ½C‖θ‖².
    pub smoothness: f64,
    pub sigma: f64,
    pub batch_size: usize,
    /// Training-set size N.
    pub total: usize,
    /// Poison fractions P/N to test.
    pub ratios: Vec<f64>,
    /// Gradient draws per trial used to estimate E[ΔU].
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_c")]
    pub c_descent: f64,
    /// ‖∇U‖ at the starting point of each trial.
    #[serde(default = "default_grad_norm")]
    pub grad_norm: f64,
}

fn default_c() -> f64 {
    DEFAULT_C_DESCENT
}

fn default_grad_norm() -> f64 {
    1.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.dim == 0 || self.trials == 0 || self.steps == 0 {
            return bad("dim, steps and trials must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.total {
            return bad("batch size must lie in 1..=N");
        }
        if !(self.lr > 0.0 && self.smoothness > 0.0 && self.sigma >= 0.0 && self.grad_norm > 0.0) {
            return bad("lr, smoothness and grad_norm must be positive, sigma non-negative");
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("poison ratios must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn estimates(&self) -> TheoryEstimates {
        TheoryEstimates {
            smoothness: self.smoothness,
            sigma: self.sigma,
            upper_grad_norm: self.grad_norm,
            lr: self.lr,
            batch_size: self.batch_size,
            c_descent: self.c_descent,
            mean_clean_grad_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub ratio: f64,
    pub poison: usize,
    /// Ratio meets the bound.
    pub sufficient: bool,
    /// Share of trials with mean ΔU ≤ −c·α‖∇U‖².
    pub holds_fraction: f64,
    pub mean_delta_u: f64,
    pub target: f64,
    /// Largest per-trial mean of ‖Σ_batch ε‖².
    pub max_noise_energy: f64,
    /// Whether every trial respected E‖Σε‖² ≤ nσ².
    pub noise_within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub min_ratio: MinRatio,
    pub noise_bound: f64,
    pub points: Vec<SimPoint>,
}

struct TrialOutcome {
    mean_du: f64,
    noise_energy: f64,
}

fn run_trial(cfg: &SimConfig, poison: usize, point: usize, trial: usize) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((point as u64) << 32) | trial as u64);
    let c = cfg.smoothness;
    let dir = unit_normal(&mut rng, cfg.dim);
    let theta: Vec<f64> = dir.iter().map(|d| d * cfg.grad_norm / c).collect();
    let grad_u: Vec<f64> = theta.iter().map(|t| c * t).collect();
    let u_old = 0.5 * c * theta.iter().map(|t| t * t).sum::<f64>();
    let hyper = Hypergeometric::new(cfg.total as u64, poison as u64, cfg.batch_size as u64)
        .map_err(|e| Error::InvalidConfig(format!("hypergeometric: {e}")))?;
    let n = cfg.batch_size as f64;
    let mut sum_du = 0.0;
    let mut sum_e2 = 0.0;
    let mut noise = vec![0.0; cfg.dim];
    for _ in 0..cfg.steps {
        let p = hyper.sample(&mut rng) as f64;
        noise.iter_mut().for_each(|v| *v = 0.0);
        if cfg.sigma > 0.0 {
            for _ in 0..cfg.batch_size {
                let d = unit_normal(&mut rng, cfg.dim);
                let u: f64 = 1.0 - rng.random::<f64>();
                let r = u * cfg.sigma;
                noise.iter_mut().zip(&d).for_each(|(e, x)| *e += r * x);
            }
        }
        sum_e2 += noise.iter().map(|e| e * e).sum::<f64>();
        let mut u_new = 0.0;
        for j in 0..cfg.dim {
            let g = (p * grad_u[j] + noise[j]) / n;
            let t = theta[j] - cfg.lr * g;
            u_new += t * t;
        }
        sum_du += 0.5 * c * u_new - u_old;
    }
    Ok(TrialOutcome {
        mean_du: sum_du / cfg.steps as f64,
        noise_energy: sum_e2 / cfg.steps as f64,
    })
}

/// Monte Carlo of one SGD step on `U = ½C‖θ‖²` with a hypergeometric
/// number of poison rows per batch.
pub fn simulate_bound(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let min_ratio = min_poison_ratio(&cfg.estimates())?;
    let target = -cfg.c_descent * cfg.lr * cfg.grad_norm * cfg.grad_norm;
    let noise_bound = cfg.batch_size as f64 * cfg.sigma * cfg.sigma;
    let mut points = Vec::with_capacity(cfg.ratios.len());
    for (pi, &ratio) in cfg.ratios.iter().enumerate() {
        let poison = (ratio * cfg.total as f64).round() as usize;
        let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, poison, pi, t))
            .collect::<Result<_>>()?;
        let holds = outcomes.iter().filter(|o| o.mean_du <= target).count();
        let max_e2 = outcomes.iter().map(|o| o.noise_energy).fold(0.0, f64::max);
        points.push(SimPoint {
            ratio,
            poison,
            sufficient: ratio >= min_ratio.ratio,
            holds_fraction: holds as f64 / cfg.trials as f64,
            mean_delta_u: outcomes.iter().map(|o| o.mean_du).sum::<f64>() / cfg.trials as f64,
            target,
            max_noise_energy: max_e2,
            noise_within_bound: max_e2 <= noise_bound,
        });
    }
    Ok(SimReport {
        min_ratio,
        noise_bound,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(lr: f64, c: f64, sigma: f64, n: usize, g: f64, cd: f64) -> TheoryEstimates {
        TheoryEstimates {
            smoothness: c,
            sigma,
            upper_grad_norm: g,
            lr,
            batch_size: n,
            c_descent: cd,
            mean_clean_grad_norm: 0.0,
        }
    }

    #[test]
    fn formula_examples() {
        let r = min_poison_ratio(&est(0.01, 1.0, 0.0, 1, 1.0, 0.0)).unwrap();
        assert!((r.ratio - 0.005).abs() < 1e-15);
        let r = min_poison_ratio(&est(0.1, 2.0, 2.0, 8, 1.0, 1e-4)).unwrap();
        assert!((r.ratio - 0.1501).abs() < 1e-12);
        assert!(!r.infeasible);
        assert!(min_poison_ratio(&est(0.1, 2.0, 2.0, 8, 0.0, 1e-4)).is_err());
        assert!(min_poison_ratio(&est(1.0, 3.0, 0.0, 8, 1.0, 0.0)).unwrap().infeasible);
    }

    #[test]
    fn noiseless_full_poisoning() {
        let cfg = SimConfig {
            dim: 3,
            lr: 0.1,
            smoothness: 2.0,
            sigma: 0.0,
            batch_size: 4,
            total: 40,
            ratios: vec![1.0],
            steps: 10,
            trials: 3,
            seed: 5,
            c_descent: 1e-4,
            grad_norm: 1.0,
        };
        let rep = simulate_bound(&cfg).unwrap();
        // θ − αCθ: ΔU = ½C‖θ‖²((1 − αC)² − 1) with ‖θ‖ = 1/C
        let expect = 0.5 * 2.0 * 0.25 * ((1.0f64 - 0.2).powi(2) - 1.0);
        assert!((rep.points[0].mean_delta_u - expect).abs() < 1e-12);
        assert_eq!(rep.points[0].holds_fraction, 1.0);
    }

    #[test]
    fn secants_on_quadratic_stay_below_top_eigenvalue() {
        let diag = [3.0, 1.0, 0.5];
        let est = secant_smoothness(
            |t| Ok(t.iter().zip(&diag).map(|(x, d)| x * d).collect()),
            &[0.0; 3],
            20,
            0.1,
            1,
        )
        .unwrap();
        assert!(est.windows(2).all(|w| w[1] >= w[0]));
        assert!(*est.last().unwrap() <= 3.0 + 1e-9);
        assert!(*est.last().unwrap() > 2.9);
    }
}
