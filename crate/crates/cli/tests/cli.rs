use std::path::{Path, PathBuf};
use std::process::Command;

use fairpoison_cli::config::{ExperimentConfig, Grid};
use fairpoison_cli::experiment::Runner;
use fairpoison_cli::output::{csv_bytes, tidy_rows, TIDY_HEADER};
use fairpoison_cli::sweep::{defense_sweep, sweep, SimFile};
use fairpoison_cli::{run_experiment, write_artifact};
use fairpoison_core::pipeline::AttackKind;

const SMALL: &str = r#"
attacks = ["ENG-FLD"]
budgets = [0.1]
seeds = [1]
post_epochs = 2

[data]
source = "synth"
n = 300
m = 6
mean_shift = 1.5
correlation = 0.5
seed = 3

[victim]
kind = "ICVAE_US"
repr_dim = 3
aux_hidden = 8
train = { epochs = 5, batch_size = 64 }

[eng]
iterations = 5
"#;

fn small(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("{extra}\n{SMALL}"), Path::new("")).unwrap()
}

fn with(f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = small("");
    f(&mut c);
    c
}

fn results_csv(a: &fairpoison_cli::RunArtifact) -> Vec<u8> {
    csv_bytes(&TIDY_HEADER, &tidy_rows(a)).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn validation_errors_name_the_field() {
    let err = |text: &str| format!("{:#}", ExperimentConfig::from_toml(text, Path::new("")).unwrap_err());
    let e = err(&SMALL.replace("budgets = [0.1]", "budgets = [0.1, 1.5]"));
    assert!(e.contains("budgets[1]"), "{e}");
    let e = err(&SMALL.replace("seeds = [1]", "seeds = []"));
    assert!(e.contains("seeds"), "{e}");
    let e = err(&SMALL.replace("repr_dim = 3", "repr_dim = 3\nwidth = 4"));
    assert!(e.contains("width"), "{e}");
    let e = err(&SMALL.replace("\"ENG-FLD\"", "\"ENG-XYZ\""));
    assert!(e.contains("XYZ"), "{e}");
    let e = err(&SMALL.replace("iterations = 5", "iterations = 5\nlambda1 = -1.0"));
    assert!(e.contains("eng"), "{e}");
}

#[test]
fn grids_expand_in_order_and_reject_empty_axes() {
    let g: Grid = toml::from_str("lambda1 = [0.0, 0.0025, 0.005, 0.01]\nlambda2_ratio = 2.0").unwrap();
    let pts = g.points().unwrap();
    assert_eq!(pts.len(), 4);
    assert_eq!(pts[2].lambda1, Some(0.005));
    assert_eq!(pts[2].lambda2, Some(0.01));
    let g: Grid = toml::from_str("lambda1 = [0.1, 0.2]\nvariant = [\"FLD\", \"EUC\"]").unwrap();
    assert_eq!(g.points().unwrap().len(), 4);

    assert!(Grid::default().points().is_err());
    let g: Grid = toml::from_str("lambda1 = []").unwrap();
    assert!(g.points().is_err());
    let g: Grid = toml::from_str("lambda1 = [0.1]\nlambda2 = [0.2]\nlambda2_ratio = 2.0").unwrap();
    assert!(g.points().is_err());
}

#[test]
fn outputs_have_one_report_per_run_and_one_control_per_seed() {
    let cfg = with(|c| {
        c.seeds = vec![1, 2];
        c.budgets = vec![0.05, 0.1];
    });
    let a = run_experiment(&cfg).unwrap();
    assert!(a.all_ok(), "{:?}", a.failures());
    assert_eq!(a.runs.len(), 4);
    assert_eq!(a.controls.len(), 2);
    assert_eq!(a.plans.len(), 4);
    for r in &a.runs {
        assert!(r.report.as_ref().unwrap().deltas.is_some());
    }
}

#[test]
fn the_none_attack_is_its_own_control() {
    let cfg = with(|c| c.attacks = vec![AttackKind::None]);
    let a = run_experiment(&cfg).unwrap();
    let d = a.runs[0].report.as_ref().unwrap().deltas.unwrap();
    assert_eq!([d.bce_probe, d.dp_violation, d.y_accuracy], [0.0; 3]);
    assert_eq!([d.scores.fld, d.scores.sfld, d.scores.euc], [0.0; 3]);
}

#[test]
fn one_point_grid_matches_a_plain_run() {
    let cfg = small("");
    let plain = run_experiment(&cfg).unwrap();
    let grid: Grid = toml::from_str("lambda1 = [0.0025]").unwrap();
    let s = sweep(&Runner::new(), &cfg, &grid).unwrap();
    assert_eq!(s.points.len(), 1);
    let a = s.points[0].artifact.as_ref().unwrap();
    assert_eq!(results_csv(a), results_csv(&plain));
}

#[test]
fn failing_grid_points_are_recorded_and_the_sweep_continues() {
    let cfg = small("");
    let grid: Grid = toml::from_str("lambda1 = [-1.0, 0.0025]").unwrap();
    let s = sweep(&Runner::new(), &cfg, &grid).unwrap();
    assert!(!s.all_ok());
    assert!(s.points[0].error.is_some());
    assert!(s.points[1].is_ok());
    let rows = s.rows();
    assert_eq!(rows.len(), 2);
    let status = 7 + 4;
    assert_eq!(rows[0][status], "failed");
    assert!(rows[0][status + 1].contains("eng"), "{}", rows[0][status + 1]);
    assert_eq!(rows[1][status], "ok");
}

#[test]
fn identical_configs_write_identical_files() {
    let cfg = with(|c| {
        c.attacks = vec![
            AttackKind::Eng(fairpoison_core::objective::ScoreKind::Sfld),
            AttackKind::None,
        ]
    });
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    write_artifact(&run_experiment(&cfg).unwrap(), d1.path()).unwrap();
    write_artifact(&run_experiment(&cfg).unwrap(), d2.path()).unwrap();
    let (f1, f2) = (files(d1.path()), files(d2.path()));
    assert!(f1.len() >= 5);
    assert_eq!(f1, f2);
}

#[test]
fn defense_sweep_at_the_baseline_batch_size_reproduces_the_run() {
    let cfg = small("");
    let runner = Runner::new();
    let base = runner.run(&cfg).unwrap();
    let table = defense_sweep(&runner, &cfg, &[64]).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.bce_decrease, vec![base.runs[0].bce_decrease().unwrap()]);

    // without the shared cache the numbers are the same
    let fresh = defense_sweep(&Runner::new(), &cfg, &[64]).unwrap();
    assert_eq!(fresh, table);
    assert!(defense_sweep(&runner, &cfg, &[]).is_err());
}

#[test]
fn csv_sources_resolve_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("age,score,group,label\n");
    for i in 0..120 {
        let g = if i % 3 == 0 { "f" } else { "m" };
        csv.push_str(&format!(
            "{},{},{g},{}\n",
            20 + i % 40,
            (i * 7 % 11) as f64 / 3.0,
            if i % 4 < 2 { "yes" } else { "no" }
        ));
    }
    std::fs::write(dir.path().join("data.csv"), csv).unwrap();
    let text = SMALL.replace(
        "[data]\nsource = \"synth\"\nn = 300\nm = 6\nmean_shift = 1.5\ncorrelation = 0.5\nseed = 3",
        "[data]\nsource = \"csv\"\npath = \"data.csv\"\nschema = { sensitive = \"group\", label = \"label\" }",
    );
    std::fs::write(dir.path().join("exp.toml"), text).unwrap();
    let cfg = ExperimentConfig::load(dir.path().join("exp.toml")).unwrap();
    let data = cfg.check_with_data().unwrap();
    assert_eq!((data.len(), data.n_features()), (120, 2));
    let a = run_experiment(&cfg).unwrap();
    assert!(a.all_ok(), "{:?}", a.failures());
}

#[test]
fn simulation_files_parse() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sim.toml");
    std::fs::write(
        &p,
        "out_dir = \"o\"\n[simulate]\ndim = 3\nlr = 0.1\nsmoothness = 1.0\nsigma = 0.5\nbatch_size = 4\ntotal = 100\nratios = [0.5]\nsteps = 50\ntrials = 4\nseed = 1\n",
    )
    .unwrap();
    let f = SimFile::load(&p).unwrap();
    assert_eq!(f.out_dir, Some(dir.path().join("o")));
    assert_eq!(f.simulate.c_descent, 1e-4);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairpoison"))
}

#[test]
fn exit_code_reflects_run_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "lambda1 = [-1.0, 0.0025]").unwrap();

    let ok = bin().arg("validate").arg(&cfg).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let ok = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("run/results.csv").exists());

    let partial = bin()
        .args(["sweep"])
        .arg(&cfg)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .output()
        .unwrap();
    assert!(!partial.status.success());
    assert!(dir.path().join("sweep/sweep.csv").exists());

    std::fs::write(&cfg, SMALL.replace("budgets = [0.1]", "budgets = [2.0]")).unwrap();
    let bad = bin().arg("validate").arg(&cfg).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("budgets[0]"));
}

#[test]
fn demo_config_reproduces_the_checked_in_numbers() {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/demo.toml")).unwrap();
    let a = run_experiment(&cfg).unwrap();
    let golden = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/demo_results.csv")).unwrap();
    assert!(
        results_csv(&a) == golden,
        "demo results differ from tests/golden/demo_results.csv"
    );
}
