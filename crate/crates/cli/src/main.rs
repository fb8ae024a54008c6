use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

mod args;
mod baseline;
mod config;
mod context;
mod datasets;
mod evaluate;
mod segment;

use args::{Cli, Command, DatasetsCommand};
use context::Ctx;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BACKEND: u8 = 3;

/// Bad flags, flag combinations or config.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Some images failed; the rest of the run's outputs were written.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
    pub log: PathBuf,
}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} items failed; see {}", self.failed, self.total, self.log.display())
    }
}

impl std::error::Error for PartialFailure {}

pub fn write_errors(path: &Path, errors: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "error"])?;
    for (id, e) in errors {
        w.write_record([id, e])?;
    }
    w.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<plantseg::Error>() {
            return match e.kind() {
                plantseg::ErrorKind::Usage => EXIT_USAGE,
                plantseg::ErrorKind::Data => EXIT_DATA,
                plantseg::ErrorKind::Backend => EXIT_BACKEND,
            };
        }
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(cli.global)?;
    match &cli.command {
        Command::FitPca(a) => segment::fit_pca(&ctx, a),
        Command::Segment(a) => segment::segment(&ctx, a),
        Command::Evaluate(a) => evaluate::evaluate(&ctx, a),
        Command::AblateMaskInput(a) => segment::ablate(&ctx, a),
        Command::TrainBaseline(a) => baseline::train_baseline(&ctx, a),
        Command::ScalingCurve(a) => baseline::scaling_curve(&ctx, a),
        Command::CrossEval(a) => baseline::cross_eval(&ctx, a),
        Command::PcaHist(a) => segment::pca_hist(&ctx, a),
        Command::Datasets(DatasetsCommand::Verify(a)) => datasets::verify(&ctx, a),
        Command::Datasets(DatasetsCommand::MakeMini(a)) => datasets::make_mini(&ctx, a),
        Command::Report(a) => evaluate::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plantseg {name}: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
