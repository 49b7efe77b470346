mod common;

use common::{gaussian, labels, rng, to_rows};
use fairpoison_core::eval::{
    bce_probe, dp_gap, dp_violation, entropy_diagnostics, fit_probe, spearman, y_accuracy, EvalReport, ProbeConfig,
};
use fairpoison_core::oracles::oracle_probe;
use fairpoison_core::Matrix;
use rand::Rng;

fn cfg() -> ProbeConfig {
    ProbeConfig::default()
}

#[test]
fn six_point_probe_matches_newton_oracle() {
    let z = Matrix::from_rows(&[
        vec![0.0, 1.0],
        vec![1.0, 0.5],
        vec![2.0, -0.3],
        vec![1.5, 1.2],
        vec![3.0, 0.0],
        vec![0.5, -1.0],
    ]);
    // (1, 0.5) sits inside the triangle of group 0, so the optimum is interior
    let a = vec![0, 1, 1, 0, 1, 0];
    let ours = bce_probe(&z, &a, 2, &cfg()).unwrap();
    let oracle = oracle_probe(&to_rows(&z), &a, 1e3);
    assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
}

#[test]
fn random_probes_match_newton_oracle() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let d = r.random_range(1..5);
        let n = r.random_range(20..80);
        let z = gaussian(&mut r, n, d, 1.0);
        let a = labels(&mut r, n, 2);
        let ours = bce_probe(&z, &a, 2, &cfg()).unwrap();
        let oracle = oracle_probe(&to_rows(&z), &a, 1e3);
        assert!((ours - oracle).abs() < 1e-6, "seed {seed}: {ours} vs {oracle}");
    }
}

#[test]
fn independent_representations_give_the_null_loss() {
    let mut r = rng(17);
    let z = gaussian(&mut r, 2000, 8, 1.0);
    let a: Vec<usize> = (0..2000).map(|i| i % 2).collect();
    let bce = bce_probe(&z, &a, 2, &cfg()).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!(bce >= ln2 - 0.03 && bce <= ln2 + 0.01, "{bce}");
}

#[test]
fn separable_groups_reach_near_zero_loss_under_the_cap() {
    let mut r = rng(3);
    let mut z = gaussian(&mut r, 200, 2, 0.3);
    let a: Vec<usize> = (0..200).map(|i| i % 2).collect();
    for (i, &g) in a.iter().enumerate() {
        z[(i, 0)] += if g == 1 { 3.0 } else { -3.0 };
    }
    let p = fit_probe(&z, &a, 2, &cfg()).unwrap();
    assert!(p.loss < 0.01);
    assert!(p.weights.frobenius_norm() <= 1e3 + 1e-9);
}

#[test]
fn probe_is_deterministic() {
    let mut r = rng(8);
    let z = gaussian(&mut r, 100, 3, 1.0);
    let a = labels(&mut r, 100, 3);
    let p = fit_probe(&z, &a, 3, &cfg()).unwrap();
    let q = fit_probe(&z, &a, 3, &cfg()).unwrap();
    assert_eq!(p, q);
}

#[test]
fn parity_gap_examples() {
    let a = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let yhat = [true, true, true, false, true, false, false, false];
    assert_eq!(dp_gap(&yhat, &a, 2).unwrap(), 0.5);
    assert_eq!(dp_gap(&[true; 8], &a, 2).unwrap(), 0.0);
    let same: Vec<bool> = a.iter().map(|&g| g == 1).collect();
    assert_eq!(dp_gap(&same, &a, 2).unwrap(), 1.0);
    assert!(dp_gap(&[true; 4], &[0, 0, 0, 0], 2).is_err());
}

#[test]
fn label_probe_accuracy_examples() {
    // constant labels: majority share
    let mut r = rng(1);
    let z = gaussian(&mut r, 10, 2, 1.0);
    assert_eq!(y_accuracy(&z, &[1; 10], &cfg()).unwrap(), 1.0);

    // six points on a line; the logistic fit splits at 2.5 except the swapped pair
    let z = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
    let y = [0, 0, 1, 0, 1, 1];
    assert_eq!(y_accuracy(&z, &y, &cfg()).unwrap(), 4.0 / 6.0);

    let z = Matrix::from_rows(&[vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]]);
    assert_eq!(y_accuracy(&z, &[0, 0, 1, 1], &cfg()).unwrap(), 1.0);
    // label probe equals a exactly: full parity gap
    assert_eq!(dp_violation(&z, &[0, 0, 1, 1], &[0, 0, 1, 1], 2, &cfg()).unwrap(), 1.0);
}

#[test]
fn entropy_examples() {
    let a: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let y: Vec<u8> = a.iter().map(|&v| v as u8).collect();
    let e = entropy_diagnostics(&a, &y).unwrap();
    assert!((e.h_a - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(e.h_y_given_a, 0.0);
    assert!((e.mi_y_a - e.h_y).abs() < 1e-15);

    let mut r = rng(5);
    let a: Vec<usize> = (0..10_000).map(|_| r.random_range(0..2)).collect();
    let y: Vec<u8> = (0..10_000).map(|_| r.random_range(0..2)).collect();
    assert!(entropy_diagnostics(&a, &y).unwrap().mi_y_a < 0.01);
}

#[test]
fn rank_correlation_examples() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(spearman(&x, &[0.1, 0.5, 0.6, 2.0, 9.0]), Some(1.0));
    assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&x, &[1.0; 5]), None);
}

#[test]
fn report_bound_and_zero_control_deltas() {
    let mut r = rng(12);
    let z = gaussian(&mut r, 300, 4, 1.0);
    let a = labels(&mut r, 300, 2);
    let y: Vec<u8> = labels(&mut r, 300, 2).into_iter().map(|v| v as u8).collect();
    let mut rep = EvalReport::evaluate(&z, &a, &y, 2, 1e-4, &cfg()).unwrap();
    // the MI lower bound −BCE + H(a) never exceeds H(a)
    assert!(-rep.bce_probe + rep.entropies.h_a <= rep.entropies.h_a + 1e-6);
    let control = rep.clone();
    rep.set_control(&control);
    let d = rep.deltas.unwrap();
    assert_eq!((d.bce_probe, d.dp_violation, d.y_accuracy), (0.0, 0.0, 0.0));
    assert_eq!(rep.bce_decrease(), Some(0.0));
}
