use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safe_cl::harness::ablate::{parse_grid, run_grid};
use safe_cl::harness::run::{check_expectations, prepare, run_prepared, write_outputs, write_snapshots};
use safe_cl::harness::ExperimentConfig;
use safe_cl::{suite, Error};

#[derive(Parser)]
#[command(name = "safe-cl", version, about = "Slow/fast parameter-efficient continual learning on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit with status 4 if the config's `expect` thresholds fail.
        #[arg(long)]
        assert: bool,
        /// Also write per-sample predictions.
        #[arg(long)]
        dump_predictions: bool,
        /// Also save backbone, learner and head archives under <out>/snapshots.
        #[arg(long)]
        snapshots: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Run a grid of configurations derived from a base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Named grid or `key=v1,v2;key2=a,b`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Run the brute-force oracle checks.
    Oracle,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_numeric() {
        ExitCode::from(EXIT_NUMERIC)
    } else if matches!(e, Error::Config(_) | Error::Generation(_)) {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::FAILURE
    }
}

fn report(lines: &[suite::CheckLine]) -> bool {
    for l in lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} checks, {} failed", lines.len(), failed);
    failed == 0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, assert, dump_predictions, snapshots } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let result = prepare(&cfg).and_then(|p| {
                let o = run_prepared(&cfg, &p)?;
                write_outputs(&out, &cfg, &o, dump_predictions)?;
                if snapshots {
                    write_snapshots(&out.join("snapshots"), &p.surrogate.backbone, &o)?;
                }
                Ok(o)
            });
            let o = match result {
                Ok(o) => o,
                Err(e) => return fail(&e),
            };
            for (name, t) in o.metrics.tracks() {
                println!("{name:>9}: final {:.4}  average {:.4}", t.final_accuracy, t.average_accuracy);
            }
            println!("wrote {}", out.display());
            if assert {
                let failures = check_expectations(&cfg, &o.metrics);
                for f in &failures {
                    eprintln!("threshold failed: {f}");
                }
                if !failures.is_empty() {
                    return ExitCode::from(EXIT_THRESHOLD);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Gradcheck { instances } => match suite::gradcheck_suite(instances) {
            Ok(lines) if report(&lines) => ExitCode::SUCCESS,
            Ok(_) => ExitCode::from(EXIT_NUMERIC),
            Err(e) => fail(&e),
        },
        Command::Ablate { config, grid, out } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => return fail(&Error::Config(format!("{}: {e}", config.display()))),
            };
            let result = parse_grid(&grid).and_then(|cells| run_grid(&text, &cells, Some(&out)));
            match result {
                Ok(rows) => {
                    for (name, m) in rows {
                        let fast = m.fast.as_ref().map_or("-".to_string(), |f| format!("{:.4}", f.final_accuracy));
                        println!("{name:>32}: slow {:.4}  fast {fast}  aggregate {:.4}", m.slow.final_accuracy, m.aggregate.final_accuracy);
                    }
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Oracle => match suite::oracle_suite() {
            Ok(lines) if report(&lines) => ExitCode::SUCCESS,
            Ok(_) => ExitCode::from(EXIT_NUMERIC),
            Err(e) => fail(&e),
        },
    }
}
