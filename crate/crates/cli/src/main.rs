//! `edgebias`: command-line entry point of the laboratory.

mod commands;
mod overrides;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AugmentArgs, AuditArgs, EvalArgs, GenArgs, GradcheckArgs, ReportArgs, SaliencyArgs, TrainArgs};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CODES: &str = "\
Exit codes:
  0  success, all validations passed
  1  internal error
  2  usage error (unknown subcommand, flag or bad flag value)
  3  I/O error (missing, unreadable or unwritable file)
  4  invalid config or input data
  5  a validation or postcondition check failed";

#[derive(Parser, Debug)]
#[command(name = "edgebias", version, about = "Center-position bias laboratory for convolutional networks", after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "EDGEBIAS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Object-position heatmaps from a COCO-style annotation file.
    Audit(AuditArgs),
    /// Preview samples of a dataset config as PGM image/label pairs.
    Gen(GenArgs),
    /// Run a regional training experiment and export its results.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured evaluation bands.
    Eval(EvalArgs),
    /// Saliency-shift difference map of a checkpoint.
    Saliency(SaliencyArgs),
    /// Transform a sample image and check the transform's postconditions.
    Augment(AugmentArgs),
    /// Gradient checks of every op and the U-Net, plus shift equivariance.
    Gradcheck(GradcheckArgs),
    /// Combine and print result matrices.
    Report(ReportArgs),
}

/// A check ran and did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ValidationFailed(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    use edgebias::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationFailed>().is_some() {
            return 5;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => 3,
                E::Config(_)
                | E::Json(_)
                | E::Format { .. }
                | E::InvalidArgument(_)
                | E::UnknownCategory(_)
                | E::MissingReference(_)
                | E::Precision { .. }
                | E::DegeneratePolicy { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Audit(a) => commands::audit(a),
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Saliency(a) => commands::saliency(a),
        Command::Augment(a) => commands::augment(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
