mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctseg::Error;

#[derive(Parser, Debug)]
#[command(name = "ctseg", version, about = "Synthetic micro-CT acquisition, reconstruction and multi-stage segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Global seed (overrides the config file)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all available cores
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file or directory, depending on the subcommand
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom: attenuation volume plus ground-truth labels
    Phantom(commands::PhantomArgs),
    /// Forward-project an attenuation volume into a sinogram stack
    Project(commands::ProjectArgs),
    /// Filtered back-projection at a dose level, mapped to 16 bits
    Reconstruct(commands::ReconstructArgs),
    /// Train one pipeline stage on gray/label volume pairs
    Train(commands::TrainArgs),
    /// Run the three-stage pipeline on a gray volume
    Infer(commands::InferArgs),
    /// Score a segmentation against ground truth
    Evaluate(commands::EvaluateArgs),
    /// Leave-one-stack-out cross validation of the full pipeline at one dose
    Crossval(commands::CrossvalArgs),
    /// Weighted-IoU matrix over training dose sets and test doses
    AblateDose(commands::AblateArgs),
    /// Write volume slices as PGM images
    ExportSlices(commands::ExportArgs),
    /// Apply a 2D filter to a PGM image
    Filter(commands::FilterArgs),
}

/// Exit status: 2 for malformed input, 3 for a missing file, 4 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
        Some(e) if e.is_input_error() => 2,
        _ => 4,
    }
}

fn kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
        Some(Error::Io { .. }) => "io",
        Some(Error::Format(_)) => "format",
        Some(Error::Config(_)) | Some(Error::Json(_)) => "config",
        Some(Error::Spec(_)) => "spec",
        Some(Error::Bounds { .. }) => "bounds",
        Some(Error::Shape(_)) => "shape",
        Some(Error::Reconstruction(_)) => "reconstruction",
        Some(Error::Training(_)) => "training",
        Some(Error::Model(_)) => "model",
        Some(Error::Metric(_)) => "metric",
        Some(Error::Data(_)) => "data",
        None => "internal",
    }
}

/// Context chain joined with ": ", skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ").to_string();
            eprintln!("{}", serde_json::json!({"error": {"kind": "usage", "message": first, "exit_code": 2}}));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("{}", serde_json::json!({"error": {"kind": "internal", "message": e.to_string(), "exit_code": 4}}));
            return ExitCode::from(4);
        }
    }
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let line = serde_json::json!({
                "error": {"kind": kind(&err), "message": message(&err), "exit_code": code}
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
