mod common;

use fairpoison_core::attack::AnchorKind;
use fairpoison_core::objective::ScoreKind;
use fairpoison_core::pipeline::{fidelity_run, prepare, run_attack, run_control, AttackKind, PipelineSpec};
use fairpoison_core::victims::{Arch, VictimKind};

fn spec(kind: VictimKind, attack: AttackKind) -> PipelineSpec {
    let mut s = PipelineSpec::new(kind, Arch::new(8, 4).aux_hidden(10), attack);
    s.train.epochs = 10;
    s.train.batch_size = 64;
    s.post_epochs = 4;
    s.eng.iterations = 10;
    s
}

#[test]
fn no_attack_gives_exactly_zero_deltas() {
    let data = common::synth(500, 8, 5);
    for kind in VictimKind::ALL {
        let s = spec(kind, AttackKind::None);
        let prep = prepare(&data, &s).unwrap();
        let control = run_control(&prep, &s).unwrap();
        let out = run_attack(&prep, &s, &control).unwrap();
        let d = out.report.deltas.unwrap();
        assert_eq!(d.bce_probe, 0.0);
        assert_eq!(d.dp_violation, 0.0);
        assert_eq!(d.y_accuracy, 0.0);
        assert_eq!([d.scores.fld, d.scores.sfld, d.scores.euc], [0.0; 3]);
        assert!(out.plan.is_none());
    }
}

#[test]
fn replications_are_deterministic() {
    let data = common::synth(500, 8, 5);
    for attack in [AttackKind::Eng(ScoreKind::Sfld), AttackKind::Anchor(AnchorKind::NraaY)] {
        let s = spec(VictimKind::CfairEo, attack);
        let run = || {
            let prep = prepare(&data, &s).unwrap();
            let control = run_control(&prep, &s).unwrap();
            let out = run_attack(&prep, &s, &control).unwrap();
            (out.report, out.plan, out.anchors, control)
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn attacks_keep_labels_and_sensitive_values() {
    let data = common::synth(500, 8, 6);
    let s = spec(VictimKind::IcvaeUs, AttackKind::Eng(ScoreKind::Euc));
    let prep = prepare(&data, &s).unwrap();
    let control = run_control(&prep, &s).unwrap();
    let out = run_attack(&prep, &s, &control).unwrap();
    let plan = out.plan.unwrap();
    assert_eq!(plan.rows, prep.poison_rows);
    let poisoned = plan.apply(&prep.training).unwrap();
    assert_eq!(poisoned.a(), prep.training.a());
    assert_eq!(poisoned.y(), prep.training.y());
    assert!(out.report.perturbation.unwrap().l1 > 0.0);
}

#[test]
fn anchor_attacks_record_one_pair_per_epoch() {
    let data = common::synth(500, 8, 7);
    let s = spec(VictimKind::Cfair, AttackKind::Anchor(AnchorKind::RaaA));
    let prep = prepare(&data, &s).unwrap();
    let control = run_control(&prep, &s).unwrap();
    let out = run_attack(&prep, &s, &control).unwrap();
    assert_eq!(out.anchors.len(), s.post_epochs);
}

#[test]
fn fidelity_curve_has_one_point_per_epoch() {
    let data = common::synth(400, 8, 8);
    let s = spec(VictimKind::IcvaeS, AttackKind::None);
    let curve = fidelity_run(&data, &s).unwrap();
    assert_eq!(curve.bce.len(), s.train.epochs);
    assert_eq!(curve.neg_scores.len(), s.train.epochs);
    for r in curve.rho.iter().flatten() {
        assert!((-1.0..=1.0).contains(r));
    }
}

#[test]
fn changing_the_budget_keeps_target_and_pretraining() {
    let data = common::synth(500, 8, 9);
    let mut s = spec(VictimKind::IcvaeS, AttackKind::None);
    let a = prepare(&data, &s).unwrap();
    s.budget = 0.15;
    let b = prepare(&data, &s).unwrap();
    let c = a.with_budget(&data, &s).unwrap();
    assert_eq!(b.split, c.split);
    assert_eq!(b.poison_rows, c.poison_rows);
    assert_eq!(b.pretrained.theta(), c.pretrained.theta());
    assert_eq!(a.pretrained.theta(), b.pretrained.theta());
    assert!(b.poison_rows.len() > a.poison_rows.len());
}
