mod common;

use common::{gaussian, labels, rng, to_rows};
use fairpoison_core::objective::{fld_score, multiclass_score, ObjectiveVariant, ScoreKind, DEFAULT_RIDGE};
use fairpoison_core::oracles::{oracle_fld, oracle_multiclass, OracleResult};
use fairpoison_core::Matrix;
use rand::Rng;

/// Random representations; every third instance is rank-deficient (a
/// repeated column and fewer rows per group than dimensions) so that the
/// ridge alone keeps the pooled scatter invertible.
fn instance(seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let d = r.random_range(1..=8);
    match seed % 3 {
        2 if d > 1 => {
            let n = r.random_range(4..=d + 2);
            let mut z = gaussian(&mut r, n, d, 1.0);
            for i in 0..n {
                let v = z[(i, 0)];
                z[(i, d - 1)] = v;
            }
            (z, labels(&mut r, n, 2))
        }
        _ => {
            let n = r.random_range(4..=60);
            let scale = 10f64.powf(r.random_range(-0.5..0.5));
            (gaussian(&mut r, n, d, scale), labels(&mut r, n, 2))
        }
    }
}

#[test]
fn binary_score_matches_explicit_inverse_on_a_thousand_instances() {
    let mut near_singular = 0;
    for seed in 0..1000u64 {
        let (z, a) = instance(seed);
        let rows = to_rows(&z);
        for kind in ScoreKind::ALL {
            let s = fld_score(&z, &a, ObjectiveVariant::new(kind)).unwrap().score;
            // sFLD only changes gradients, so its value is the FLD value
            let o = oracle_fld(&rows, &a, 1, DEFAULT_RIDGE, kind == ScoreKind::Euc).unwrap();
            let cmp = OracleResult::compare(s, o, 1e-10);
            assert!(cmp.agrees, "seed {seed} {kind}: {s} vs oracle {o}");
        }
        if seed % 3 == 2 && z.cols() > 1 {
            near_singular += 1;
        }
    }
    assert!(near_singular > 250);
}

#[test]
fn multiclass_score_matches_per_class_oracle() {
    for seed in 0..200u64 {
        let mut r = rng(40_000 + seed);
        let k = r.random_range(2..=5);
        let d = r.random_range(1..=6);
        let n = r.random_range(2 * k..=50);
        let z = gaussian(&mut r, n, d, 1.0);
        let a = labels(&mut r, n, k);
        for kind in [ScoreKind::Fld, ScoreKind::Euc] {
            let s = multiclass_score(&z, &a, k, ObjectiveVariant::new(kind)).unwrap();
            let o = oracle_multiclass(&to_rows(&z), &a, k, DEFAULT_RIDGE, kind == ScoreKind::Euc);
            assert!(
                OracleResult::compare(s.score, o, 1e-10).agrees,
                "seed {seed}: {} vs {o}",
                s.score
            );
            assert!(s.empty_classes.is_empty());
        }
    }
}

#[test]
fn two_class_average_equals_binary_score() {
    for seed in 0..200u64 {
        let (z, a) = instance(seed);
        for kind in ScoreKind::ALL {
            let v = ObjectiveVariant::new(kind);
            let b = fld_score(&z, &a, v).unwrap().score;
            let m = multiclass_score(&z, &a, 2, v).unwrap().score;
            assert!((b - m).abs() <= 1e-12 * b.abs().max(1.0), "seed {seed}: {b} vs {m}");
        }
    }
}

#[test]
fn absent_class_contributes_zero_and_is_flagged() {
    let mut r = rng(7);
    let z = gaussian(&mut r, 12, 2, 1.0);
    let a: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let s = multiclass_score(&z, &a, 3, ObjectiveVariant::new(ScoreKind::Fld)).unwrap();
    assert_eq!(s.empty_classes, vec![2]);
    let o = oracle_multiclass(&to_rows(&z), &a, 3, DEFAULT_RIDGE, false);
    assert!((s.score - o).abs() < 1e-12);
}
