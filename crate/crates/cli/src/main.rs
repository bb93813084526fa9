//! `kdgan`: datasets, training runs, the loss ablation and comparison reports.

mod commands;
mod config;
mod state;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ablate, count, dataset, report, train};
use state::State;

/// A command declined to overwrite existing state.
#[derive(Debug)]
pub struct Refusal(pub String);

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refusal {}

pub mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const COMPARABILITY: u8 = 4;
    pub const DIVERGENCE: u8 = 5;
    pub const REFUSED: u8 = 6;
}

#[derive(Parser, Debug)]
#[command(name = "kdgan", version, about = "Teacher-student GAN distillation experiments")]
struct Cli {
    /// Root directory for datasets, runs, reports and cached segmenters.
    #[arg(long, env = "KDGAN_STATE", default_value = "kdgan-state", global = true)]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Dataset(dataset::DatasetArgs),
    /// Train a teacher, a from-scratch student or a distilled student.
    Train(train::TrainArgs),
    /// Distill once per loss combination and seed, then tabulate.
    Ablate(ablate::AblateArgs),
    /// Qualitative grid and score tables for scratch, vanilla, ours and teacher runs.
    Report(report::ReportArgs),
    /// Parameter and FLOP table for the generator configurations.
    Count(count::CountArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use kdgan::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Refusal>().is_some() {
            return exit::REFUSED;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config { .. } | E::Shape(_) => exit::CONFIG,
                E::Data(_) | E::Load { .. } | E::SegmenterGate { .. } => exit::DATA,
                E::Comparability(_) => exit::COMPARABILITY,
                E::Divergence { .. } | E::Numeric(_) => exit::DIVERGENCE,
                E::Invariant(_) | E::Io(_) | E::Json(_) | E::Image(_) => exit::OTHER,
            };
        }
    }
    exit::OTHER
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let state = State::new(cli.state);
    let result = match &cli.command {
        Command::Dataset(a) => dataset::run(&state, a),
        Command::Train(a) => train::run(&state, a),
        Command::Ablate(a) => ablate::run(&state, a),
        Command::Report(a) => report::run(&state, a),
        Command::Count(a) => count::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
