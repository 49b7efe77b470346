use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

use super::arch::VictimKind;
use super::model::{Batch, VictimModel};
use super::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub shuffle: bool,
    /// Seeds shuffling and reparameterization noise.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

impl TrainConfig {
    /// Optimizer defaults per victim family (AdaDelta 0.1 for the
    /// adversarial family, Adam 0.001 for the VAE family), batch 512.
    pub fn defaults_for(kind: VictimKind) -> Self {
        let (optimizer, lr) = if kind.is_adversarial() {
            (OptimizerKind::Adadelta, 0.1)
        } else {
            (OptimizerKind::Adam, 0.001)
        };
        TrainConfig {
            optimizer,
            lr,
            batch_size: 512,
            epochs: 50,
            shuffle: false,
            seed: 1,
        }
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_rows {
            return Err(Error::InvalidConfig(format!(
                "batch size {} outside 1..={n_rows}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Whatever the epoch hook returned, in epoch order.
    pub snapshots: Vec<Matrix>,
}

/// Trains on every row of `data` in fixed order (unless shuffling).
pub fn train(victim: &mut VictimModel, data: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    let mut owned = data.clone();
    train_with_hook(victim, &mut owned, config, |_, _, _| Ok(None))
}

/// Like [`train`], calling `hook(epoch, victim, data)` after every epoch.
/// The hook may rewrite the training data (anchor reselection) and may
/// return a snapshot that is stored in the log.
pub fn train_with_hook<F>(
    victim: &mut VictimModel,
    data: &mut Dataset,
    config: &TrainConfig,
    mut hook: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &VictimModel, &mut Dataset) -> Result<Option<Matrix>>,
{
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    config.validate(data.len())?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, victim.n_params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let stochastic = !victim.kind().is_adversarial();
    let d = victim.repr_dim();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Batch::new(
                data.x().select_rows(chunk),
                chunk.iter().map(|&i| data.a()[i]).collect(),
                chunk.iter().map(|&i| data.y()[i]).collect(),
            );
            if stochastic {
                let eps: Vec<f64> = (0..chunk.len() * d)
                    .map(|_| StandardNormal.sample(&mut noise_rng))
                    .collect();
                batch = batch.with_noise(Matrix::from_vec(chunk.len(), d, eps));
            }
            let lg = victim.loss_grad_at(victim.theta(), &batch, false)?;
            if !lg.loss.is_finite() || lg.theta.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            opt.step(victim.theta_mut(), &lg.theta);
            total += lg.loss;
            batches += 1;
        }
        if victim.theta().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        log.epoch_loss.push(total / batches as f64);
        if let Some(snap) = hook(epoch, victim, data)? {
            log.snapshots.push(snap);
        }
    }
    Ok(log)
}
