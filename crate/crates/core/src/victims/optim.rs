use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
    Adam,
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    /// Matches the common framework form: `Δ = lr · √(E[Δ²]+ε)/√(E[g²]+ε) · g`.
    Adadelta {
        lr: f64,
        rho: f64,
        eps: f64,
        sq_grad: Vec<f64>,
        sq_delta: Vec<f64>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adadelta => Optimizer::Adadelta {
                lr,
                rho: 0.9,
                eps: 1e-6,
                sq_grad: vec![0.0; n_params],
                sq_delta: vec![0.0; n_params],
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
        }
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adadelta {
                lr,
                rho,
                eps,
                sq_grad,
                sq_delta,
            } => {
                for i in 0..theta.len() {
                    let g = grad[i];
                    sq_grad[i] = *rho * sq_grad[i] + (1.0 - *rho) * g * g;
                    let d = ((sq_delta[i] + *eps).sqrt() / (sq_grad[i] + *eps).sqrt()) * g;
                    sq_delta[i] = *rho * sq_delta[i] + (1.0 - *rho) * d * d;
                    theta[i] -= *lr * d;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step);
                let bc2 = 1.0 - beta2.powi(*step);
                for i in 0..theta.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    theta[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.5, 2);
        let mut th = [1.0, -1.0];
        o.step(&mut th, &[2.0, 4.0]);
        assert_eq!(th, [0.0, -3.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.01, 2);
        let mut th = [0.0, 0.0];
        o.step(&mut th, &[3.0, -0.2]);
        assert!((th[0] + 0.01).abs() < 1e-8);
        assert!((th[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn adadelta_descends_quadratic() {
        let mut o = Optimizer::new(OptimizerKind::Adadelta, 1.0, 1);
        let mut th = [2.0];
        for _ in 0..2000 {
            let g = [th[0]];
            o.step(&mut th, &g);
        }
        assert!(th[0].abs() < 2.0);
        assert!(th[0] < 1.9);
    }
}
