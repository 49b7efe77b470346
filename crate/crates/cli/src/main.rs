use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fairpoison_cli::config::{ExperimentConfig, Grid};
use fairpoison_cli::experiment::Runner;
use fairpoison_cli::sweep::{defense_sweep, run_simulation, sweep, write_defense, write_simulation, SimFile};
use fairpoison_cli::write_artifact;

#[derive(Parser)]
#[command(
    name = "fairpoison",
    version,
    about = "Poisoning experiments against fair representation learners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed × budget × attack of an experiment config.
    Run {
        config: PathBuf,
        /// Overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per point of a grid file.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun an experiment at several continued-training batch sizes.
    Defense {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        batch_sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo check of the minimal poisoning ratio on a quadratic.
    SimulateBound {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config (and optionally a grid) without running.
    Validate {
        config: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn report_failures(failures: &[String]) -> ExitCode {
    for f in failures {
        eprintln!("failed: {f}");
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} run(s) failed", failures.len());
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let artifact = Runner::new().run(&cfg)?;
            write_artifact(&artifact, &dir)?;
            for r in artifact.runs.iter().filter(|r| r.is_ok()) {
                println!(
                    "{} {:<8} budget {} seed {}: bce decrease {:+.4}",
                    r.victim,
                    r.attack,
                    r.budget,
                    r.seed,
                    r.bce_decrease().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", dir.display());
            Ok(report_failures(&artifact.failures()))
        }
        Command::Sweep { config, grid, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = Grid::load(&grid)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let result = sweep(&Runner::new(), &cfg, &grid)?;
            result.write(&dir)?;
            println!("{} grid point(s), wrote {}", result.points.len(), dir.display());
            let failures: Vec<String> = result
                .points
                .iter()
                .flat_map(|p| {
                    p.error
                        .iter()
                        .cloned()
                        .chain(p.artifact.iter().flat_map(|a| a.failures()))
                })
                .collect();
            Ok(report_failures(&failures))
        }
        Command::Defense {
            config,
            batch_sizes,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let table = defense_sweep(&Runner::new(), &cfg, &batch_sizes)?;
            write_defense(&table, &dir)?;
            for r in &table.rows {
                println!(
                    "n {:>5} {:<8} budget {}: mean bce decrease {:+.4}, mean Δ(−s) {:+.4}",
                    r.batch_size, r.attack, r.budget, r.mean_bce_decrease, r.mean_delta_neg_score
                );
            }
            for (attack, budget, ok) in &table.baseline_succeeds {
                if !ok {
                    eprintln!("warning: {attack} at budget {budget} does not succeed at the largest batch size");
                }
            }
            println!("wrote {}", dir.display());
            Ok(report_failures(&table.errors))
        }
        Command::SimulateBound { config, out } => {
            let file = SimFile::load(&config)?;
            let dir = out.or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let report = run_simulation(&file.simulate)?;
            write_simulation(&report, &dir)?;
            println!(
                "minimal ratio {:.6}{}",
                report.min_ratio.ratio,
                if report.min_ratio.infeasible {
                    " (infeasible)"
                } else {
                    ""
                }
            );
            for p in &report.points {
                println!(
                    "P/N {:<8} sufficient {:<5} holds {:.3} E[ΔU] {:+.3e} target {:+.3e}",
                    p.ratio, p.sufficient, p.holds_fraction, p.mean_delta_u, p.target
                );
            }
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config, grid } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = cfg.check_with_data()?;
            println!(
                "ok: {} rows, {} features, {} attacked run(s)",
                data.len(),
                data.n_features(),
                cfg.n_runs()
            );
            if let Some(g) = grid {
                let grid = Grid::load(&g)?;
                let points = grid.points()?;
                for (i, p) in points.iter().enumerate() {
                    p.apply(&cfg).map_err(|e| e.context(format!("grid point {i}")))?;
                }
                println!("ok: {} grid point(s)", points.len());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
