mod common;

use common::{gaussian, labels, rel_err, rng, to_rows};
use fairpoison_core::attack::{cosine_match, matching_gradient};
use fairpoison_core::objective::{score_grad_z, upper_grad, ObjectiveVariant, ScoreKind, DEFAULT_RIDGE};
use fairpoison_core::oracles::{oracle_fld, oracle_frozen_scatter, oracle_grad, oracle_multiclass};
use fairpoison_core::victims::{build_victim, train, Arch, Batch, TrainConfig, VictimKind, VictimModel};
use fairpoison_core::Matrix;
use rand::Rng;

const CASES: u64 = 100;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// Initial weights plus noise on every coordinate, so biases are nonzero
/// and no ReLU sits exactly on its kink.
fn random_victim(r: &mut rand_chacha::ChaCha8Rng, kind: VictimKind, arch: Arch, seed: u64) -> VictimModel {
    let mut v = build_victim(kind, arch, seed).unwrap();
    let noise = gaussian(r, 1, v.n_params(), 0.1);
    let theta: Vec<f64> = v.theta().iter().zip(noise.data()).map(|(t, e)| t + e).collect();
    v.set_theta(&theta);
    v
}

fn random_batch(r: &mut rand_chacha::ChaCha8Rng, kind: VictimKind, m: usize, d: usize, n: usize) -> Batch {
    let x = gaussian(r, n, m, 1.0);
    let a = labels(r, n, 2);
    let y: Vec<u8> = labels(r, n, 2).into_iter().map(|v| v as u8).collect();
    let batch = Batch::new(x, a, y);
    if !kind.is_adversarial() && r.random::<bool>() {
        let eps = gaussian(r, n, d, 1.0);
        batch.with_noise(eps)
    } else {
        batch
    }
}

#[test]
fn victim_parameter_gradients_match_central_differences() {
    for kind in VictimKind::ALL {
        let mut worst = 0.0f64;
        for case in 0..CASES {
            let mut r = rng(1000 + case);
            let m = r.random_range(1..=12);
            let d = r.random_range(1..=8);
            let n = r.random_range(8..=40);
            let arch = Arch::new(m, d)
                .encoder_hidden(r.random_range(0..=4))
                .aux_hidden(r.random_range(1..=6));
            let v = random_victim(&mut r, kind, arch, case);
            let batch = random_batch(&mut r, kind, m, d, n);
            let analytic: Vec<f64> = v
                .loss_grad_at(v.theta(), &batch, false)
                .unwrap()
                .theta
                .iter()
                .zip(v.reversal_signs())
                .map(|(g, s)| g * s)
                .collect();
            let fd = oracle_grad(|t| v.loss_at(t, &batch).unwrap(), v.theta(), STEP);
            let e = rel_err(&analytic, &fd, 1e-8);
            assert!(e < TOL, "{kind} case {case}: relative error {e:e}");
            worst = worst.max(e);
        }
        assert!(worst < TOL);
    }
}

#[test]
fn victim_input_gradients_match_central_differences() {
    for kind in VictimKind::ALL {
        for case in 0..CASES {
            let mut r = rng(5000 + case);
            let m = r.random_range(1..=12);
            let d = r.random_range(1..=8);
            let n = r.random_range(8..=40);
            let arch = Arch::new(m, d)
                .encoder_hidden(r.random_range(0..=4))
                .aux_hidden(r.random_range(1..=6));
            let v = random_victim(&mut r, kind, arch, case);
            let batch = random_batch(&mut r, kind, m, d, n);
            let analytic = v.loss_grad_at(v.theta(), &batch, true).unwrap().x.unwrap();
            let fd = oracle_grad(
                |x| {
                    let mut b = batch.clone();
                    b.x = Matrix::from_vec(n, m, x.to_vec());
                    v.loss_at(v.theta(), &b).unwrap()
                },
                batch.x.data(),
                STEP,
            );
            let e = rel_err(analytic.data(), &fd, 1e-8);
            assert!(e < TOL, "{kind} case {case}: relative error {e:e}");
        }
    }
}

#[test]
fn objective_gradients_match_central_differences() {
    for kind in ScoreKind::ALL {
        for case in 0..CASES {
            let mut r = rng(9000 + case);
            let d = r.random_range(1..=8);
            let n = r.random_range(8..=40);
            let k = if case % 4 == 3 { 3 } else { 2 };
            let z = gaussian(&mut r, n, d, 1.0);
            let a = labels(&mut r, n, k);
            let variant = ObjectiveVariant::new(kind);
            let (_, g) = score_grad_z(&z, &a, k, variant).unwrap();
            let rows = to_rows(&z);
            let as_rows = |flat: &[f64]| flat.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
            let fd = match kind {
                ScoreKind::Fld => oracle_grad(
                    |f| oracle_multiclass(&as_rows(f), &a, k, DEFAULT_RIDGE, false),
                    z.data(),
                    STEP,
                ),
                ScoreKind::Euc => oracle_grad(
                    |f| oracle_multiclass(&as_rows(f), &a, k, DEFAULT_RIDGE, true),
                    z.data(),
                    STEP,
                ),
                ScoreKind::Sfld => oracle_grad(
                    |f| oracle_frozen_scatter(&as_rows(f), &rows, &a, k, DEFAULT_RIDGE),
                    z.data(),
                    STEP,
                ),
            };
            let e = rel_err(g.data(), &fd, 1e-8);
            assert!(e < TOL, "{kind} case {case} (k = {k}): relative error {e:e}");
        }
    }
}

#[test]
fn frozen_scatter_oracle_agrees_with_full_score_in_value() {
    let mut r = rng(3);
    let z = gaussian(&mut r, 20, 3, 1.0);
    let a = labels(&mut r, 20, 2);
    let rows = to_rows(&z);
    let full = oracle_fld(&rows, &a, 1, DEFAULT_RIDGE, false).unwrap();
    assert!((oracle_frozen_scatter(&rows, &rows, &a, 2, DEFAULT_RIDGE) - full).abs() < 1e-12);
}

#[test]
fn upper_gradient_matches_central_differences() {
    let data = common::synth(60, 5, 4);
    for kind in VictimKind::ALL {
        let v = random_victim(
            &mut rng(kind as u64),
            kind,
            Arch::new(5, 3).encoder_hidden(3).aux_hidden(4),
            2,
        );
        for score in ScoreKind::ALL.into_iter().filter(|s| *s != ScoreKind::Sfld) {
            let variant = ObjectiveVariant::new(score);
            let up = upper_grad(&v, &data, variant).unwrap();
            let fd = oracle_grad(
                |t| {
                    let mut w = v.clone();
                    w.set_theta(t);
                    let z = w.encode(data.x()).unwrap();
                    -oracle_multiclass(&to_rows(&z), data.a(), 2, DEFAULT_RIDGE, score == ScoreKind::Euc)
                },
                v.theta(),
                STEP,
            );
            let e = rel_err(&up.grad, &fd, 1e-8);
            assert!(e < TOL, "{kind} {score}: relative error {e:e}");
        }
    }
}

#[test]
fn matching_gradient_matches_differences_of_the_cosine() {
    let data = common::synth(200, 6, 3);
    for kind in VictimKind::ALL {
        let mut v = build_victim(kind, Arch::new(6, 3).aux_hidden(5), 1).unwrap();
        let mut tc = TrainConfig::defaults_for(kind);
        tc.epochs = 5;
        tc.batch_size = 50;
        train(&mut v, &data, &tc).unwrap();
        let target = data.subset(&(100..200).collect::<Vec<_>>());
        let poison = data.subset(&(0..5).collect::<Vec<_>>());
        let up = upper_grad(&v, &target, ObjectiveVariant::new(ScoreKind::Fld)).unwrap();
        let grad_s: Vec<f64> = up.grad.iter().map(|x| -x).collect();
        let delta = Matrix::filled(5, 6, 0.01);
        let b_at = |flat: &[f64]| {
            let d = Matrix::from_vec(5, 6, flat.to_vec());
            let batch = Batch::new(poison.x().add(&d).unwrap(), poison.a().to_vec(), poison.y().to_vec());
            cosine_match(&grad_s, &v.lower_level_grad(&batch).unwrap()).unwrap()
        };
        let analytic = matching_gradient(&v, &delta, &poison, &up.grad, 1e-4).unwrap();
        let fd = oracle_grad(b_at, delta.data(), 1e-5);
        let e = rel_err(analytic.data(), &fd, 1e-8);
        assert!(e < 1e-4, "{kind}: relative error {e:e}");
    }
}
