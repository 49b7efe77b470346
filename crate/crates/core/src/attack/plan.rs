use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

use super::eng::{OpCounts, Rescale};
use super::prox::BoxConstraint;

/// Crafted perturbations for a fixed set of poison rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    /// Positions of the poison rows in the training set.
    pub rows: Vec<usize>,
    /// `P × M`; row `p` perturbs `rows[p]`.
    pub delta: Matrix,
    pub bounds: BoxConstraint,
    /// Objective value at Δ⁰ followed by one entry per iteration.
    pub trace: Vec<f64>,
    /// Cosine matching `B` alongside `trace`.
    pub matching: Vec<f64>,
    pub base_step: f64,
    pub rescale: Rescale,
    pub counts: OpCounts,
}

/// Which features a plan touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub mask: Vec<bool>,
    pub fraction: f64,
}

impl FeatureSelection {
    /// Names of untouched features.
    pub fn robust<'a>(&self, names: &'a [String]) -> Vec<&'a str> {
        self.mask
            .iter()
            .zip(names)
            .filter(|(s, _)| !**s)
            .map(|(_, n)| n.as_str())
            .collect()
    }
}

/// Feature `m` is selected iff some `|Δ[p, m]| > tolerance`.
pub fn selected_features(plan: &PoisonPlan, tolerance: f64) -> FeatureSelection {
    let m = plan.delta.cols();
    let mut mask = vec![false; m];
    for p in 0..plan.delta.rows() {
        for (j, v) in plan.delta.row(p).iter().enumerate() {
            if v.abs() > tolerance {
                mask[j] = true;
            }
        }
    }
    let fraction = if m == 0 {
        0.0
    } else {
        mask.iter().filter(|s| **s).count() as f64 / m as f64
    };
    FeatureSelection { mask, fraction }
}

/// Norms reported alongside a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub mean_row_l1: f64,
}

/// JSON companion of the CSV perturbation file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanSidecar<C> {
    pub config: C,
    pub rows: Vec<usize>,
    pub bounds: BoxConstraint,
    pub trace: Vec<f64>,
    pub matching: Vec<f64>,
    pub base_step: f64,
    pub rescale: Rescale,
    pub counts: OpCounts,
    pub norms: PlanNorms,
    pub selection: FeatureSelection,
    pub robust_features: Vec<String>,
}

impl PoisonPlan {
    /// Plan that perturbs nothing.
    pub fn zero(rows: Vec<usize>, n_features: usize, bounds: BoxConstraint) -> Self {
        let p = rows.len();
        PoisonPlan {
            rows,
            delta: Matrix::zeros(p, n_features),
            bounds,
            trace: Vec::new(),
            matching: Vec::new(),
            base_step: 0.0,
            rescale: Rescale::IDENTITY,
            counts: OpCounts::default(),
        }
    }

    pub fn norms(&self) -> PlanNorms {
        let d = self.delta.data();
        let l1: f64 = d.iter().map(|v| v.abs()).sum();
        PlanNorms {
            l1,
            l2: d.iter().map(|v| v * v).sum::<f64>().sqrt(),
            linf: self.delta.max_abs(),
            mean_row_l1: if self.rows.is_empty() {
                0.0
            } else {
                l1 / self.rows.len() as f64
            },
        }
    }

    /// Training set with `Δ` added to the poison rows; labels untouched.
    pub fn apply(&self, training: &Dataset) -> Result<Dataset> {
        if self.delta.cols() != training.n_features() || self.delta.rows() != self.rows.len() {
            return Err(Error::ShapeMismatch {
                op: "apply plan",
                lhs: self.delta.shape(),
                rhs: (self.rows.len(), training.n_features()),
            });
        }
        let mut x = training.x().clone();
        for (p, &r) in self.rows.iter().enumerate() {
            if r >= training.len() {
                return Err(Error::InvalidConfig(format!("poison row {r} outside training set")));
            }
            for (v, d) in x.row_mut(r).iter_mut().zip(self.delta.row(p)) {
                *v += d;
            }
        }
        training.with_rows(x, training.a().to_vec(), training.y().to_vec())
    }

    /// Every perturbed row lies inside the box.
    pub fn is_feasible(&self, training: &Dataset) -> bool {
        self.rows.iter().enumerate().all(|(p, &r)| {
            let row: Vec<f64> = training
                .x()
                .row(r)
                .iter()
                .zip(self.delta.row(p))
                .map(|(a, b)| a + b)
                .collect();
            self.bounds.contains(&row)
        })
    }

    /// CSV with a `row` column (labelled by `labels[p]`) and one column per feature.
    pub fn write_csv<W: Write>(&self, w: W, labels: &[usize], feature_names: &[String]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string()];
        header.extend(feature_names.iter().cloned());
        out.write_record(&header)?;
        for (p, label) in labels.iter().enumerate().take(self.delta.rows()) {
            let mut rec = vec![label.to_string()];
            rec.extend(self.delta.row(p).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn sidecar<C: Clone>(&self, config: &C, feature_names: &[String], tolerance: f64) -> PlanSidecar<C> {
        let selection = selected_features(self, tolerance);
        PlanSidecar {
            config: config.clone(),
            rows: self.rows.clone(),
            bounds: self.bounds.clone(),
            trace: self.trace.clone(),
            matching: self.matching.clone(),
            base_step: self.base_step,
            rescale: self.rescale,
            counts: self.counts,
            norms: self.norms(),
            robust_features: selection.robust(feature_names).into_iter().map(String::from).collect(),
            selection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(delta: Matrix) -> PoisonPlan {
        let m = delta.cols();
        PoisonPlan {
            rows: (0..delta.rows()).collect(),
            delta,
            bounds: BoxConstraint::new(vec![-1.0; m], vec![1.0; m]).unwrap(),
            trace: vec![],
            matching: vec![],
            base_step: 0.0,
            rescale: Rescale::IDENTITY,
            counts: OpCounts::default(),
        }
    }

    #[test]
    fn selection_extremes() {
        let z = plan(Matrix::zeros(3, 4));
        let s = selected_features(&z, 0.0);
        assert_eq!(s.fraction, 0.0);
        let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        assert_eq!(s.robust(&names).len(), 4);
        let dense = plan(Matrix::filled(2, 4, 0.1));
        assert_eq!(selected_features(&dense, 0.0).fraction, 1.0);
    }

    #[test]
    fn apply_keeps_labels() {
        let ds = Dataset::new(Matrix::zeros(3, 2), vec![0, 1, 0], vec![1, 0, 0], 2).unwrap();
        let mut p = plan(Matrix::from_rows(&[vec![0.5, -0.5]]));
        p.rows = vec![2];
        let out = p.apply(&ds).unwrap();
        assert_eq!(out.x().row(2), &[0.5, -0.5]);
        assert_eq!(out.x().row(0), &[0.0, 0.0]);
        assert_eq!(out.a(), ds.a());
        assert_eq!(out.y(), ds.y());
        assert!(p.is_feasible(&ds));
    }

    #[test]
    fn csv_layout() {
        let p = plan(Matrix::from_rows(&[vec![0.25, 0.0]]));
        let mut buf = Vec::new();
        p.write_csv(&mut buf, &[17], &["u".into(), "v".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row,u,v\n17,2.5e-1,0e0\n");
    }
}
