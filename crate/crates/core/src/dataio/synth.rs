use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{sigmoid, Matrix};

use super::dataset::Dataset;

/// Parameters of the synthetic tabular generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Distance between sensitive-group centroids along every feature.
    pub mean_shift: f64,
    /// Strength of the sensitive-dependent label intercept, in [-1, 1].
    pub correlation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scale of the feature-driven part of the label logit.
    #[serde(default = "default_label_signal")]
    pub label_signal: f64,
    pub seed: u64,
}

fn default_k() -> usize {
    2
}

fn default_noise() -> f64 {
    1.0
}

fn default_label_signal() -> f64 {
    2.0
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig("synth.k must be at least 2".into()));
        }
        if self.n < 4 * self.k {
            return Err(Error::InvalidConfig(format!(
                "synth.n must be at least 4K = {}",
                4 * self.k
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("synth.m must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(Error::InvalidConfig("synth.correlation must lie in [-1, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.mean_shift.is_finite() && self.label_signal.is_finite()) {
            return Err(Error::InvalidConfig(
                "synth noise/shift/signal must be finite, noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Intercept swing (in logits) at `correlation = ±1`.
const INTERCEPT_SCALE: f64 = 2.0;

/// Per-group Gaussian features; labels from a logistic model of `x` with a
/// sensitive-dependent intercept. Deterministic by seed.
///
/// For K = 2 the centroids are `∓shift/2` on every feature; for K > 2 each
/// centroid coordinate is `±shift/2` with seeded random signs.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let SynthConfig { n, m, k, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let centroids: Vec<Vec<f64>> = if k == 2 {
        vec![vec![-0.5 * config.mean_shift; m], vec![0.5 * config.mean_shift; m]]
    } else {
        (0..k)
            .map(|_| {
                (0..m)
                    .map(|_| if rng.random::<bool>() { 0.5 } else { -0.5 } * config.mean_shift)
                    .collect()
            })
            .collect()
    };
    let label_w: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    let w_norm = label_w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);

    let mut x = Matrix::zeros(n, m);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let ai = rng.random_range(0..k);
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = centroids[ai][j] + config.noise * e;
        }
        let proj: f64 = row.iter().zip(&label_w).map(|(p, q)| p * q).sum::<f64>() / w_norm;
        let level = 2.0 * ai as f64 / (k - 1) as f64 - 1.0;
        let logit = config.label_signal * proj + INTERCEPT_SCALE * config.correlation * level;
        let yi = u8::from(rng.random::<f64>() < sigmoid(logit));
        a.push(ai);
        y.push(yi);
    }
    Dataset::new(x, a, y, k)
}
