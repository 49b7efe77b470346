use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint clean / poison / target row indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub clean_idx: Vec<usize>,
    pub poison_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
}

impl Split {
    /// Training rows (clean ∪ poison) in ascending order.
    pub fn training_idx(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.clean_idx.iter().chain(&self.poison_idx).copied().collect();
        t.sort_unstable();
        t
    }
}

/// Uniform random split reproducible by `seed`.
///
/// `|target| = round(target_frac·N)`, `|poison| = round(poison_frac·(N − |target|))`.
pub fn split(n: usize, target_frac: f64, poison_frac: f64, seed: u64) -> Result<Split> {
    let in_unit = |f: f64| (0.0..=1.0).contains(&f);
    if !in_unit(target_frac) || !in_unit(poison_frac) || target_frac + poison_frac > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "split fractions out of range: target {target_frac}, poison {poison_frac}"
        )));
    }
    let n_target = ((target_frac * n as f64).round() as usize).min(n);
    let n_poison = ((poison_frac * (n - n_target) as f64).round() as usize).min(n - n_target);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut target_idx = order[..n_target].to_vec();
    let mut poison_idx = order[n_target..n_target + n_poison].to_vec();
    let mut clean_idx = order[n_target + n_poison..].to_vec();
    target_idx.sort_unstable();
    poison_idx.sort_unstable();
    clean_idx.sort_unstable();
    Ok(Split {
        clean_idx,
        poison_idx,
        target_idx,
    })
}
