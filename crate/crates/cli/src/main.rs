//! `esctl`: run extremum-seeking experiments from scenario files.
//!
//! On success the run summary is printed to stdout as JSON. On failure a
//! single JSON object `{"error": <kind>, "message": <text>}` goes to stderr
//! and the exit code is 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esctl_core::harness::{
    default_out_dir, list_scenarios, load_scenario_file, run_experiment, ExperimentSpec, Mode,
};
use esctl_core::Error;

#[derive(Parser)]
#[command(
    name = "esctl",
    version,
    about = "Extremum-seeking controller synthesis experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run ES on a scenario and write iterations, trajectories and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Learn an open-loop control or a feedback gain field; defaults to the scenario's `es.feedback`.
        #[arg(long, value_enum)]
        mode: Option<EsMode>,
    },
    /// Solve the Riccati oracle only.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Run ES and the oracle and report the relative gap.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// List scenario files and their ids.
    ListScenarios {
        #[arg(long, env = "ESCTL_SCENARIO_DIR", default_value = "scenarios")]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Number of ES iterations (overrides `es.iterations`).
    #[arg(long)]
    iters: Option<usize>,
    /// Noise seed (overrides `noise.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$ESCTL_OUT_DIR/<id>` or `runs/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Edit a scenario key before validation, e.g. `--override basis.pairs=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EsMode {
    OpenLoop,
    Feedback,
}

fn spec(common: Common, mode: Mode) -> Result<ExperimentSpec, Error> {
    let out_dir = match common.out {
        Some(d) => d,
        None => default_out_dir(&load_scenario_file(&common.scenario, &common.overrides)?.id),
    };
    Ok(ExperimentSpec {
        scenario_path: common.scenario,
        mode,
        n_iterations: common.iters,
        seed: common.seed,
        out_dir,
        overrides: common.overrides,
    })
}

fn execute(cmd: Command) -> Result<String, Error> {
    let (common, mode) = match cmd {
        Command::ListScenarios { dir } => {
            let mut out = String::new();
            for (path, id) in list_scenarios(&dir)? {
                out.push_str(&format!("{id}\t{}\n", path.display()));
            }
            return Ok(out);
        }
        Command::Run { common, mode } => {
            let mode = match mode {
                Some(EsMode::OpenLoop) => Mode::OpenLoopEs,
                Some(EsMode::Feedback) => Mode::FeedbackEs,
                None => {
                    let file = load_scenario_file(&common.scenario, &common.overrides)?;
                    if file.es.is_some_and(|e| e.feedback) {
                        Mode::FeedbackEs
                    } else {
                        Mode::OpenLoopEs
                    }
                }
            };
            (common, mode)
        }
        Command::Oracle { common } => (common, Mode::OracleOnly),
        Command::Compare { common } => (common, Mode::Compare),
    };
    let summary = run_experiment(&spec(common, mode)?)?;
    Ok(serde_json::to_string_pretty(&summary)? + "\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
