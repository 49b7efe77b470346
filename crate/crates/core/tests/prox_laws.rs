use fairpoison_core::attack::{project_box, soft_threshold, BoxConstraint};
use proptest::prelude::*;

const CASES: u32 = 10_000;

fn box_and_row(m: usize) -> impl Strategy<Value = (BoxConstraint, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec((-50.0f64..50.0, 0.0f64..20.0, 0.0f64..1.0), m),
        prop::collection::vec(-100.0f64..100.0, m),
    )
        .prop_map(|(spec, delta)| {
            let lower: Vec<f64> = spec.iter().map(|s| s.0).collect();
            let upper: Vec<f64> = spec.iter().map(|s| s.0 + s.1).collect();
            let x: Vec<f64> = spec.iter().map(|s| s.0 + s.2 * s.1).collect();
            (BoxConstraint::new(lower, upper).unwrap(), x, delta)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn shrinkage_is_monotone_and_contracts(x in prop::collection::vec(-1e3f64..1e3, 1..12), t in 0.0f64..50.0) {
        let s = soft_threshold(&x, t);
        for (i, (&xi, &si)) in x.iter().zip(&s).enumerate() {
            prop_assert!(si.abs() <= xi.abs());
            prop_assert!(si == 0.0 || si.signum() == xi.signum());
            prop_assert_eq!(si == 0.0, xi.abs() <= t);
            for (&xj, &sj) in x.iter().zip(&s).skip(i + 1) {
                if xi <= xj {
                    prop_assert!(si <= sj);
                } else {
                    prop_assert!(si >= sj);
                }
            }
        }
        prop_assert_eq!(soft_threshold(&s, 0.0), s.clone());
    }

    #[test]
    fn shrinkage_composes_additively(x in -1e3f64..1e3, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let twice = soft_threshold(&soft_threshold(&[x], a), b)[0];
        let once = soft_threshold(&[x], a + b)[0];
        prop_assert!((twice - once).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn projection_is_feasible_idempotent_and_ordered((bounds, x, delta) in (1usize..10).prop_flat_map(box_and_row), scale in 0.0f64..2.0) {
        let p = project_box(&delta, &x, &bounds);
        let row: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
        prop_assert!(bounds.contains(&row));
        prop_assert_eq!(project_box(&p, &x, &bounds), p.clone());
        for (j, (&d, &pj)) in delta.iter().zip(&p).enumerate() {
            let v = x[j] + d;
            if bounds.lower[j] <= v && v <= bounds.upper[j] {
                prop_assert_eq!(pj, d);
            }
            // a scaled-down input never projects above the original
            let smaller = project_box(&[d * scale.min(1.0)], &[x[j]], &single(&bounds, j))[0];
            if d >= 0.0 {
                prop_assert!(smaller <= pj);
            } else {
                prop_assert!(smaller >= pj);
            }
        }
    }
}

fn single(b: &BoxConstraint, j: usize) -> BoxConstraint {
    BoxConstraint::new(vec![b.lower[j]], vec![b.upper[j]]).unwrap()
}

#[test]
fn fixed_examples() {
    let x = [0.3, -7.0, 2.5];
    assert_eq!(soft_threshold(&x, 0.0), x.to_vec());
    assert_eq!(soft_threshold(&[0.5], 1.0), vec![0.0]);
    assert_eq!(soft_threshold(&[-2.0], 0.5), vec![-1.5]);

    let b = BoxConstraint::new(vec![-1.0, 0.0], vec![1.0, 4.0]).unwrap();
    assert_eq!(project_box(&[0.0, 0.0], &[0.2, 3.0], &b), vec![0.0, 0.0]);
    assert_eq!(project_box(&[0.7, -1.0], &[1.0, 3.0], &b), vec![0.0, -1.0]);
}
