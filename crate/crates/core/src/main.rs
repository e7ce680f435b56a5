// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgsim::batch::CalibrationParams;
use kgsim::scenario::{self, RunOptions, ScenarioError, PRESETS};

#[derive(Parser)]
#[command(
    name = "kgsim",
    version,
    about = "Discrete-event simulator for Kubernetes GenAI scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or scenario file and write reports.
    Run {
        /// Preset name or path to a scenario TOML file.
        target: String,
        /// Comma-separated seeds, overriding the scenario's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Calibration file used in place of the shipped defaults.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Write the per-run dispatch log next to the reports.
        #[arg(long)]
        emit_dispatch_log: bool,
        /// Seed for the synthetic batch trace, overriding the scenario's.
        #[arg(long)]
        trace_seed: Option<u64>,
    },
    /// List the built-in presets.
    ListPresets,
    /// Parse and validate a scenario file without running it.
    Validate { path: PathBuf },
    /// Print a preset as a scenario TOML file.
    ShowPreset { name: String },
}

fn fail(e: &ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { 2 } else { 3 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListPresets => {
            for name in PRESETS {
                println!("{name:<18} {}", scenario::preset_description(name).unwrap_or(""));
            }
            ExitCode::SUCCESS
        }
        Command::ShowPreset { name } => match scenario::preset_scenario(&name) {
            Some(s) => {
                print!("{}", s.to_toml());
                ExitCode::SUCCESS
            }
            None => fail(&ScenarioError::UnknownPreset(name)),
        },
        Command::Validate { path } => match scenario::parse_scenario(&path) {
            Ok(s) => {
                println!("{}: ok ({} scenario `{}`)", path.display(), kind_name(&s), s.name);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            target,
            seeds,
            out,
            calibration,
            emit_dispatch_log,
            trace_seed,
        } => {
            let s = match scenario::load(&target) {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            let calibration = match calibration.map(|p| CalibrationParams::from_file(&p)).transpose() {
                Ok(c) => c,
                Err(e) => return fail(&e.into()),
            };
            let opts = RunOptions {
                seeds,
                calibration,
                emit_dispatch_log,
                trace_seed,
                check_invariants: false,
            };
            let (report, files) = match scenario::run_to_dir(&s, &opts, &out) {
                Ok(x) => x,
                Err(e) => return fail(&e),
            };
            print!("{}", report.summary_text());
            for f in &files {
                println!("wrote {}", f.display());
            }
            if report.assertions.iter().all(|(_, ok, _)| *ok) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn kind_name(s: &scenario::Scenario) -> &'static str {
    match s.kind {
        scenario::ExperimentKind::Batch => "batch",
        scenario::ExperimentKind::Serving => "serving",
        scenario::ExperimentKind::Overhead => "overhead",
    }
}
