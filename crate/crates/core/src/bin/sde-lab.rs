use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sde_lab::harness::{self, ExperimentConfig, Mode, RunOutcome};
use sde_lab::Error;

#[derive(Parser)]
#[command(name = "sde-lab", version = harness::version(), about = "Coupled strong-error experiments for SDE schemes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a named preset.
    Run {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 4 when the run misses its expected bounds.
        #[arg(long)]
        assert: bool,
    },
    /// Check a model's standing assumptions.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the shipped preset names.
    ListPresets,
}

fn fail(e: &Error) -> ExitCode {
    let reason = serde_json::json!({ "status": "error", "code": harness::exit_code(e), "reason": e.to_string() });
    eprintln!("{reason}");
    ExitCode::from(harness::exit_code(e) as u8)
}

fn report(config: &ExperimentConfig, outcome: &RunOutcome) {
    if outcome.validation.is_some() {
        println!("wrote {}", config.validation_path().display());
    } else {
        print!("{}", outcome.csv());
        println!("wrote {}", config.csv_path().display());
    }
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (config, assert) = match cli.command {
        Command::ListPresets => {
            for name in harness::PRESETS {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config).map(|mut c| {
                c.mode = Mode::Validate;
                c
            });
            match cfg {
                Ok(c) => (c, false),
                Err(e) => return fail(&e),
            }
        }
        Command::Run {
            config,
            preset,
            seed,
            out,
            assert,
        } => {
            let cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::from_file(&path),
                (None, Some(name)) => harness::preset(&name),
                (None, None) => unreachable!("clap requires one of --config and --preset"),
            };
            match cfg {
                Ok(mut c) => {
                    if let Some(s) = seed {
                        c.seed = s;
                    }
                    if let Some(o) = out {
                        c.output_path = o;
                    }
                    (c, assert)
                }
                Err(e) => return fail(&e),
            }
        }
    };

    let outcome = match harness::run(&config) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    report(&config, &outcome);
    let verdict = outcome.check(&config.expect);
    if !verdict.detail.is_empty() {
        println!("{}", verdict.detail);
    }
    if assert && !verdict.passed {
        eprintln!(
            "{}",
            serde_json::json!({ "status": "assertion_failed", "code": 4, "reason": verdict.detail })
        );
        return ExitCode::from(4);
    }
    ExitCode::SUCCESS
}
