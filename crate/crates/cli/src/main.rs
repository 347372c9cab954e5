//! `appa`: generate data, train the toy detector and patches, evaluate,
//! benchmark, sweep, and render reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use appa_core::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default output root when neither `--out` nor the config sets one.
pub const OUT_ENV: &str = "APPA_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "appa", version, about = "Adversarial patch attacks on aerial detectors")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlacementArg {
    On,
    Outside,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; runs land in `<out>/<config-hash>/`.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Detector checkpoint to use instead of the one in the run directory.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and test splits to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy detector and check its clean AP.
    TrainDetector {
        #[command(flatten)]
        common: Common,
    },
    /// Optimize a patch against the frozen detector.
    TrainPatch {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Clean, noise and patched AP on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Patch file (`.json` sidecar or image); defaults to the run's patch.
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Transfer matrix over patches and detectors.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// `PROXY=PATH` patch trained on detector PROXY (repeatable).
        #[arg(long = "patch", value_name = "PROXY=PATH")]
        patches: Vec<String>,
        /// `PROXY=PATH` patch for outside-target placement (repeatable).
        #[arg(long = "outside-patch", value_name = "PROXY=PATH")]
        outside_patches: Vec<String>,
        /// `ID=CHECKPOINT` evaluation detector (repeatable).
        #[arg(long = "target", value_name = "ID=CHECKPOINT")]
        targets: Vec<String>,
    },
    /// Patched AP under a grid of evaluation-time conditions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-20,0,20")]
        angles: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.8,1,1.2")]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.1,0,0.1")]
        brightness: Vec<f64>,
    },
    /// Render tables from benchmark JSON, recomputing derived values.
    Report {
        /// Directory holding benchmark report JSON files.
        #[arg(long)]
        reports: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Invocation => 2,
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numeric => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainDetector { common } => commands::train_detector(&common),
        Command::TrainPatch { common, resume } => commands::train_patch(&common, resume.as_deref()),
        Command::Evaluate { common, patch } => commands::evaluate(&common, patch.as_deref()),
        Command::Benchmark {
            common,
            patches,
            outside_patches,
            targets,
        } => commands::benchmark(&common, &patches, &outside_patches, &targets),
        Command::Sweep {
            common,
            patch,
            angles,
            scales,
            brightness,
        } => commands::sweep(&common, patch.as_deref(), &angles, &scales, &brightness),
        Command::Report { reports } => commands::report(&reports),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
