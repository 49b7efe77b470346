mod common;

use common::{gaussian, rng, to_rows};
use fairpoison_core::objective::{ObjectiveVariant, ScoreKind};
use fairpoison_core::oracles::oracle_symmetric_max_eigen;
use fairpoison_core::pipeline::{prepare, AttackKind, PipelineSpec};
use fairpoison_core::theory::{
    estimate_constants, min_poison_ratio, secant_smoothness, simulate_bound, EstimateSpec, SimConfig, TheoryEstimates,
};
use fairpoison_core::victims::{Arch, VictimKind};
use proptest::prelude::*;

fn est(lr: f64, c: f64, sigma: f64, n: usize, g: f64, cd: f64) -> TheoryEstimates {
    TheoryEstimates {
        smoothness: c,
        sigma,
        upper_grad_norm: g,
        lr,
        batch_size: n,
        c_descent: cd,
        mean_clean_grad_norm: 0.0,
    }
}

#[test]
fn bound_examples_and_large_batch_limit() {
    assert_eq!(
        min_poison_ratio(&est(0.01, 1.0, 0.0, 1, 1.0, 0.0)).unwrap().ratio,
        0.005
    );
    let r = min_poison_ratio(&est(0.1, 2.0, 2.0, 8, 1.0, 1e-4)).unwrap().ratio;
    assert!((r - 0.1501).abs() < 1e-15, "{r}");
    let big = min_poison_ratio(&est(0.1, 2.0, 2.0, 1 << 40, 1.0, 1e-4)).unwrap().ratio;
    assert!((big - (1e-4 + 0.1)).abs() < 1e-10);
}

proptest! {
    #[test]
    fn bound_is_monotone_in_each_ingredient(
        lr in 1e-4f64..1.0, c in 1e-3f64..10.0, sigma in 0.0f64..5.0, n in 1usize..1024, g in 0.1f64..5.0, f in 1.01f64..3.0,
    ) {
        let base = min_poison_ratio(&est(lr, c, sigma, n, g, 1e-4)).unwrap().ratio;
        let r = |e: TheoryEstimates| min_poison_ratio(&e).unwrap().ratio;
        prop_assert!(r(est(lr * f, c, sigma, n, g, 1e-4)) >= base);
        prop_assert!(r(est(lr, c * f, sigma, n, g, 1e-4)) >= base);
        prop_assert!(r(est(lr, c, sigma * f, n, g, 1e-4)) >= base);
        prop_assert!(r(est(lr, c, sigma, n * 2, g, 1e-4)) <= base);
        prop_assert!(r(est(lr, c, sigma, n, g * f, 1e-4)) <= base);
        if n >= 2 && sigma > 0.0 {
            prop_assert!(r(est(lr, c, sigma, n / 2, g, 1e-4)) > base);
        }
    }
}

#[test]
fn secant_estimate_on_a_quadratic_approaches_the_top_eigenvalue() {
    let mut r = rng(21);
    let b = gaussian(&mut r, 5, 5, 1.0);
    let a = b.t_matmul(&b).unwrap();
    let lambda = oracle_symmetric_max_eigen(&to_rows(&a));
    let center = gaussian(&mut r, 1, 5, 1.0);
    let est = secant_smoothness(
        |t| Ok(a.matmul(&fairpoison_core::Matrix::column(t))?.into_vec()),
        center.data(),
        200,
        0.5,
        3,
    )
    .unwrap();
    let last = *est.last().unwrap();
    assert!((last - lambda).abs() <= 0.05 * lambda, "{last} vs {lambda}");
    // error never grows with more samples
    let errs: Vec<f64> = est.iter().map(|e| (lambda - e).abs()).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn constants_of_a_pretrained_victim_are_finite_and_ordered() {
    let data = common::synth(600, 8, 2);
    let mut spec = PipelineSpec::new(VictimKind::IcvaeS, Arch::new(8, 4).aux_hidden(10), AttackKind::None);
    spec.train.epochs = 30;
    spec.train.batch_size = 64;
    let prep = prepare(&data, &spec).unwrap();
    let e = estimate_constants(
        &prep.pretrained,
        &prep.training,
        &prep.target,
        ObjectiveVariant::new(ScoreKind::Fld),
        &EstimateSpec {
            samples: 50,
            rows: 200,
            lr: 1e-3,
            batch_size: 64,
            seed: 1,
        },
    )
    .unwrap();
    assert!(e.smoothness > 0.0 && e.smoothness.is_finite());
    assert!(e.upper_grad_norm > 0.0);
    assert!(e.mean_clean_grad_norm < e.sigma);
    let r = min_poison_ratio(&e).unwrap();
    assert!(r.ratio > e.c_descent);
}

fn theorem_setting(ratios: Vec<f64>) -> SimConfig {
    SimConfig {
        dim: 10,
        lr: 0.1,
        smoothness: 2.0,
        sigma: 2.0,
        batch_size: 8,
        total: 1000,
        ratios,
        steps: 10_000,
        trials: 200,
        seed: 42,
        c_descent: 1e-4,
        grad_norm: 1.0,
    }
}

#[test]
fn sufficient_descent_holds_above_the_minimal_ratio() {
    let cfg = theorem_setting(vec![0.0, 0.1501, 0.2, 0.5, 1.0]);
    let rep = simulate_bound(&cfg).unwrap();
    assert!((rep.min_ratio.ratio - 0.1501).abs() < 1e-15);
    for p in &rep.points {
        assert!(
            p.noise_within_bound,
            "ratio {}: noise energy {}",
            p.ratio, p.max_noise_energy
        );
        if p.sufficient {
            assert!(p.holds_fraction >= 0.95, "ratio {}: {}", p.ratio, p.holds_fraction);
        }
    }
    // no poison, no systematic descent
    let zero = &rep.points[0];
    assert!(!zero.sufficient);
    assert!(zero.mean_delta_u > zero.target);
}

#[test]
fn simulation_is_deterministic() {
    let mut cfg = theorem_setting(vec![0.3]);
    cfg.trials = 20;
    cfg.steps = 200;
    assert_eq!(simulate_bound(&cfg).unwrap(), simulate_bound(&cfg).unwrap());
}
