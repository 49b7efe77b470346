use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// Per-feature range of the clean training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxConstraint {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                op: "box",
                lhs: (1, lower.len()),
                rhs: (1, upper.len()),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidConfig("box lower bound exceeds upper bound".into()));
        }
        Ok(BoxConstraint { lower, upper })
    }

    /// Column-wise min and max of `x`.
    pub fn from_rows(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidConfig("box needs at least one clean row".into()));
        }
        let mut lower = x.row(0).to_vec();
        let mut upper = lower.clone();
        for i in 1..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
        Ok(BoxConstraint { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn mean_width(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).sum::<f64>() / self.dim().max(1) as f64
    }

    pub fn contains(&self, row: &[f64]) -> bool {
        row.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.lower[j] && v <= self.upper[j])
    }
}

/// Cosine matching loss `B = −⟨∇θs, g⟩ / (‖∇θs‖ ‖g‖)`.
pub fn cosine_match(grad_s: &[f64], grad_lower: &[f64]) -> Result<f64> {
    if grad_s.len() != grad_lower.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_match",
            lhs: (1, grad_s.len()),
            rhs: (1, grad_lower.len()),
        });
    }
    let ns = norm(grad_s);
    let nl = norm(grad_lower);
    if ns == 0.0 {
        return Err(Error::DegenerateGradient("upper-level gradient is zero"));
    }
    if nl == 0.0 {
        return Err(Error::DegenerateGradient("lower-level gradient is zero"));
    }
    let dot: f64 = grad_s.iter().zip(grad_lower).map(|(a, b)| a * b).sum();
    Ok((-dot / (ns * nl)).clamp(-1.0, 1.0))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Elementwise `sign(x) · max(|x| − threshold, 0)`.
pub fn soft_threshold(x: &[f64], threshold: f64) -> Vec<f64> {
    x.iter().map(|&v| shrink(v, threshold)).collect()
}

#[inline]
pub(crate) fn shrink(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// Clips `delta` so that `x + delta` lies in the box.
pub fn project_box(delta: &[f64], x: &[f64], bounds: &BoxConstraint) -> Vec<f64> {
    delta
        .iter()
        .enumerate()
        .map(|(j, &d)| clip(d, x[j], bounds, j))
        .collect()
}

#[inline]
pub(crate) fn clip(d: f64, x: f64, bounds: &BoxConstraint, j: usize) -> f64 {
    let (lo, hi) = (bounds.lower[j], bounds.upper[j]);
    let v = x + d;
    if v < lo {
        let mut c = lo - x;
        while x + c < lo {
            c = c.next_up();
        }
        c
    } else if v > hi {
        let mut c = hi - x;
        while x + c > hi {
            c = c.next_down();
        }
        c
    } else {
        d
    }
}
