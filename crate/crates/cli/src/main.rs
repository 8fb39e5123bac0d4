//! `facerig`: dataset synthesis, training, inference and checks for the
//! image-based rig inversion pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric check failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "facerig", version, about = "Image-based facial rig inversion")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Serial execution for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, env = "FACERIG_CONFIG")]
    config: Option<PathBuf>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural 102-control face rig.
    MakeRig(MakeRigArgs),
    /// Synthesize a training corpus from a rig.
    GenData(GenDataArgs),
    /// Train the dual-branch regressor.
    Train(TrainArgs),
    /// Predict rig parameters for one appearance/normal pair.
    Infer(InferArgs),
    /// Score a checkpoint on a generated dataset.
    Eval(EvalArgs),
    /// Render a parameter vector through the rig.
    Render(RenderArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Fit rig parameters to a target mesh by gradient descent.
    DirectFit(DirectFitArgs),
}

#[derive(Args, Debug)]
pub struct MakeRigArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Vertices per side of the face grid.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Rig manifest (`rig.json`).
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Copy base sets unchanged into later passes.
    #[arg(long)]
    pub no_perturb: bool,
    /// Rotation bound in degrees; 0 also disables translation unless
    /// `--rigid-translation` is given.
    #[arg(long, value_name = "DEG")]
    pub rigid: Option<f64>,
    /// Translation bound as a fraction of the bbox diagonal.
    #[arg(long, value_name = "FRAC")]
    pub rigid_translation: Option<f64>,
    /// `builtin`, `none` or a canonical-expressions JSON file.
    #[arg(long)]
    pub canonical: Option<String>,
    /// `tangent` or `camera`.
    #[arg(long)]
    pub normal_space: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mesh-term weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `default`, `none` or a comma-separated group list.
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint directory or its `model.json`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub appearance: PathBuf,
    #[arg(long)]
    pub normal: PathBuf,
    /// Output JSON (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// `{"values": [...]}` with one entry per control.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub normal_space: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check in f64 (tolerance 1e-5) instead of f32 (1e-3).
    #[arg(long)]
    pub double: bool,
    /// Sampled weights for the whole-model check.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DirectFitArgs {
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Target mesh as OBJ.
    #[arg(long, conflicts_with = "params", required_unless_present = "params")]
    pub target: Option<PathBuf>,
    /// Ground-truth parameters; the target is their rig decode and the
    /// recovery error is checked against `--tol`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum L∞ recovery error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Why a command stopped; each maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::MakeRig(a) => commands::make_rig(a),
        Command::GenData(a) => commands::gen_data(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a, config),
        Command::Render(a) => commands::render(a, config),
        Command::Gradcheck(a) => commands::gradcheck(a, config),
        Command::DirectFit(a) => commands::direct_fit(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Numeric(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
