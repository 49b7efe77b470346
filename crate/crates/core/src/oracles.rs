//! Slow reference implementations for tests. Nothing here reuses the
//! solvers, tapes or optimizers of the modules they check.

use crate::victims::{Batch, VictimModel};

/// Agreement of an implementation with its oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub oracle: f64,
    pub tolerance: f64,
    pub agrees: bool,
}

impl OracleResult {
    /// Relative agreement `|value − oracle| ≤ tolerance · max(1, |oracle|)`.
    pub fn compare(value: f64, oracle: f64, tolerance: f64) -> Self {
        let agrees = (value - oracle).abs() <= tolerance * oracle.abs().max(1.0);
        OracleResult {
            value,
            oracle,
            tolerance,
            agrees,
        }
    }
}

/// Gauss-Jordan inverse with full pivoting on a row-major square matrix.
pub fn explicit_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        let p = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
}

fn group_stats(z: &[Vec<f64>], members: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = z[0].len();
    let n = members.len() as f64;
    let mut mu = vec![0.0; d];
    for &i in members {
        for j in 0..d {
            mu[j] += z[i][j] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for &i in members {
        for r in 0..d {
            for c in 0..d {
                cov[r][c] += (z[i][r] - mu[r]) * (z[i][c] - mu[c]) / n;
            }
        }
    }
    (mu, cov)
}

/// `(μ0 − μ1)ᵀ (S0 + S1 + cI)⁻¹ (μ0 − μ1)` by explicit inverse; group 1 is
/// `a == positive`. `euclidean` replaces the scatter by the identity.
pub fn oracle_fld(z: &[Vec<f64>], a: &[usize], positive: usize, ridge: f64, euclidean: bool) -> Option<f64> {
    let g1: Vec<usize> = (0..z.len()).filter(|&i| a[i] == positive).collect();
    let g0: Vec<usize> = (0..z.len()).filter(|&i| a[i] != positive).collect();
    if g0.is_empty() || g1.is_empty() {
        return None;
    }
    let d = z[0].len();
    let (m0, s0) = group_stats(z, &g0);
    let (m1, s1) = group_stats(z, &g1);
    let diff: Vec<f64> = m0.iter().zip(&m1).map(|(p, q)| p - q).collect();
    if euclidean {
        return Some(diff.iter().map(|v| v * v).sum());
    }
    let pooled: Vec<Vec<f64>> = (0..d)
        .map(|r| {
            (0..d)
                .map(|c| s0[r][c] + s1[r][c] + if r == c { ridge } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = explicit_inverse(&pooled)?;
    let mut s = 0.0;
    for r in 0..d {
        for c in 0..d {
            s += diff[r] * inv[r][c] * diff[c];
        }
    }
    Some(s)
}

/// Mean over classes of the class-vs-rest score; empty splits add 0.
pub fn oracle_multiclass(z: &[Vec<f64>], a: &[usize], k: usize, ridge: f64, euclidean: bool) -> f64 {
    (0..k)
        .map(|c| oracle_fld(z, a, c, ridge, euclidean).unwrap_or(0.0))
        .sum::<f64>()
        / k as f64
}

/// Class-vs-rest mean with group means taken from `z` and scatters from
/// `frozen`; differentiating it in `z` gives the stop-gradient variant.
pub fn oracle_frozen_scatter(z: &[Vec<f64>], frozen: &[Vec<f64>], a: &[usize], k: usize, ridge: f64) -> f64 {
    let d = z[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let g1: Vec<usize> = (0..z.len()).filter(|&i| a[i] == c).collect();
        let g0: Vec<usize> = (0..z.len()).filter(|&i| a[i] != c).collect();
        if g0.is_empty() || g1.is_empty() {
            continue;
        }
        let (m0, _) = group_stats(z, &g0);
        let (m1, _) = group_stats(z, &g1);
        let (_, s0) = group_stats(frozen, &g0);
        let (_, s1) = group_stats(frozen, &g1);
        let pooled: Vec<Vec<f64>> = (0..d)
            .map(|r| {
                (0..d)
                    .map(|c| s0[r][c] + s1[r][c] + if r == c { ridge } else { 0.0 })
                    .collect()
            })
            .collect();
        let inv = explicit_inverse(&pooled).expect("ridge keeps the pooled scatter invertible");
        let diff: Vec<f64> = m0.iter().zip(&m1).map(|(p, q)| p - q).collect();
        for r in 0..d {
            for c in 0..d {
                total += diff[r] * inv[r][c] * diff[c];
            }
        }
    }
    total / k as f64
}

/// Central-difference gradient of `f` at `x`.
pub fn oracle_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean_bce(z: &[Vec<f64>], t: &[usize], w: &[f64]) -> f64 {
    let d = z[0].len();
    let mut s = 0.0;
    for (row, &ti) in z.iter().zip(t) {
        let u: f64 = w[d] + row.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>();
        // log(1 + e^u) − t·u, guarded for large |u|
        let sp = if u > 30.0 { u } else { u.exp().ln_1p() };
        s += sp - ti as f64 * u;
    }
    s / z.len() as f64
}

/// Logistic regression by damped Newton with the weight norm (bias
/// excluded) kept within `cap`; returns the mean BCE on the training rows.
pub fn oracle_probe(z: &[Vec<f64>], t: &[usize], cap: f64) -> f64 {
    let d = z[0].len();
    let n = z.len() as f64;
    let mut w = vec![0.0; d + 1];
    let feat = |row: &Vec<f64>, j: usize| if j < d { row[j] } else { 1.0 };
    for _ in 0..200 {
        let mut g = vec![0.0; d + 1];
        let mut h = vec![vec![0.0; d + 1]; d + 1];
        for (row, &ti) in z.iter().zip(t) {
            let u: f64 = w[d] + row.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>();
            let p = logistic(u);
            for r in 0..=d {
                g[r] += (p - ti as f64) * feat(row, r) / n;
                for c in 0..=d {
                    h[r][c] += p * (1.0 - p) * feat(row, r) * feat(row, c) / n;
                }
            }
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        for (r, row) in h.iter_mut().enumerate() {
            row[r] += 1e-10;
        }
        let Some(hinv) = explicit_inverse(&h) else { break };
        let dir: Vec<f64> = (0..=d)
            .map(|r| -(0..=d).map(|c| hinv[r][c] * g[c]).sum::<f64>())
            .collect();
        let f0 = mean_bce(z, t, &w);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let nrm = cand[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > cap {
                cand[..d].iter_mut().for_each(|v| *v *= cap / nrm);
            }
            if mean_bce(z, t, &cand) < f0 {
                w = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    mean_bce(z, t, &w)
}

/// One plain SGD step `θ − α ∇θL` with the gradient taken by central
/// differences of the victim loss and discriminator blocks sign-flipped.
pub fn oracle_sgd_step(victim: &VictimModel, batch: &Batch, lr: f64, step: f64) -> Vec<f64> {
    let theta = victim.theta().to_vec();
    let g = oracle_grad(|t| victim.loss_at(t, batch).expect("valid batch"), &theta, step);
    let signs = victim.reversal_signs();
    theta
        .iter()
        .zip(g.iter().zip(&signs))
        .map(|(t, (gi, s))| t - lr * s * gi)
        .collect()
}

/// Minimizer of `½a(δ − b)² + λ|δ|` over `lo ≤ δ ≤ hi` by enumerating
/// the candidate points.
pub fn oracle_prox_1d(a: f64, b: f64, lambda: f64, lo: f64, hi: f64) -> f64 {
    let f = |d: f64| 0.5 * a * (d - b) * (d - b) + lambda * d.abs();
    let mut cands = vec![lo, hi, 0.0_f64.clamp(lo, hi)];
    for c in [b - lambda / a, b + lambda / a] {
        cands.push(c.clamp(lo, hi));
    }
    cands
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .expect("nonempty")
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn oracle_symmetric_max_eigen(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).fold(f64::NEG_INFINITY, f64::max)
}
