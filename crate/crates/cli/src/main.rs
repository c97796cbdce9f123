//! `mpfer`: scene generation, noise synthesis, training and inference for
//! multiplane feature pipelines.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid user input; exits with code 2.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        InputError(msg.into())
    }
}

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser, Debug)]
#[command(name = "mpfer", version, about = "Multiplane feature encoder-renderer for burst denoising and view synthesis")]
pub struct Cli {
    /// Maximum worker threads [default: all cores]
    #[arg(long, global = true, display_order = 100, value_name = "N")]
    pub threads: Option<usize>,

    /// Seed for scene generation, noise and training [default: 0]
    #[arg(long, global = true, display_order = 101, value_name = "SEED", value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,

    /// TOML configuration merged over the preset
    #[arg(long, global = true, display_order = 102, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Pipeline preset: desk, mpfer-16, mpfer-32, mpfer-64
    #[arg(long, global = true, display_order = 103, value_name = "NAME", default_value = "desk")]
    pub preset: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    /// Configuration overrides, e.g. train.steps=500
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArg {
    /// Trained model directory; without it an untrained model is built from
    /// the configuration
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic layered scene from a camera rig
    MakeScene {
        /// Output scene directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Add signal-dependent Gaussian noise to a clean scene
    AddNoise {
        /// Clean scene directory
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output scene directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Gain level: 1, 2, 4, 8, 16 or 20
        #[arg(long, value_name = "GAIN", conflicts_with_all = ["sigma_r", "sigma_s"], required_unless_present_all = ["sigma_r", "sigma_s"])]
        gain: Option<u32>,
        /// Read-noise standard deviation
        #[arg(long, value_name = "X", requires = "sigma_s")]
        sigma_r: Option<f64>,
        /// Shot-noise variance per unit intensity
        #[arg(long, value_name = "X", requires = "sigma_r")]
        sigma_s: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model on clean scenes; noise is synthesized per example
    Train {
        /// Clean scene directory; repeat for several scenes
        #[arg(long = "data", value_name = "DIR", required = true)]
        data: Vec<PathBuf>,
        /// Output model directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Restore every input view of a noisy scene
    Denoise {
        #[command(flatten)]
        model: ModelArg,
        /// Noisy scene directory
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output scene directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Gain of the input noise; read from the scene when absent
        #[arg(long, value_name = "GAIN")]
        gain: Option<u32>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render the target views of a scene, or the views of a pose file
    Synthesize {
        #[command(flatten)]
        model: ModelArg,
        /// Scene directory with input views
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Pose file of the views to render [default: the scene's target views]
        #[arg(long, value_name = "FILE")]
        poses: Option<PathBuf>,
        /// Output scene directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a model on clean scenes and write a metric report
    Eval {
        #[command(flatten)]
        model: ModelArg,
        /// Clean scene directory; repeat for several scenes
        #[arg(long = "data", value_name = "DIR", required = true)]
        data: Vec<PathBuf>,
        /// Output report directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the first three channels of selected multiplane feature planes
    /// as images
    DumpMpf {
        #[command(flatten)]
        model: ModelArg,
        /// Scene directory with input views
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output image directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// One-based plane indices, far to near [default: all]
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        planes: Vec<usize>,
        /// Gain of the input noise for denoising models; read from the scene
        /// when absent
        #[arg(long, value_name = "GAIN")]
        gain: Option<u32>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// `2` for invalid input, `1` otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mpfer_core::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
    }
    1
}

fn fail(code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": config::one_line(message), "exit_code": code });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(2, first.trim_start_matches("error: "));
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(2, "--threads must be positive");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(1, &e.to_string());
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(&e), &format!("{e:#}")),
    }
}
