#![allow(dead_code)]

use fairpoison_core::dataio::{synth_generate, Dataset, SynthConfig};
use fairpoison_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data)
}

/// Labels with every class present at least twice.
pub fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n)
        .map(|i| if i < 2 * k { i % k } else { rng.random_range(0..k) })
        .collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn synth(n: usize, m: usize, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        n,
        m,
        k: 2,
        mean_shift: 1.0,
        correlation: 0.5,
        noise: 1.0,
        label_signal: 2.0,
        seed,
    })
    .unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(floor)
}
