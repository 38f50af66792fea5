//! `mdd`: runs one pipeline stage per invocation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod record;
pub mod synthetic;

use config::PipelineConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Core(mdd_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Core(e) if e.is_numerical() => write!(f, "numerical failure: {e}"),
            CliError::Core(e) => write!(f, "data error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mdd_core::Error> for CliError {
    fn from(e: mdd_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "mdd", version, about = "Text-conditioned motion generation with discrete diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `path=value`, e.g. `vq.steps=200`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural walking corpus with captions.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Canonicalize and encode every motion of a corpus, assigning splits.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the motion tokenizer on the training split.
    TrainVq {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional denoiser on tokenized training motions.
    TrainDenoiser {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate one motion clip from a caption (unconditional without --text).
    Generate {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        text: Option<String>,
        /// Length in frames (rounded down to whole tokens).
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write decoded joint positions here.
        #[arg(long)]
        joints: Option<PathBuf>,
        /// Also write the generated token sequence here as a JSON array.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score generations for the test split against the real motions.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Drop captions whose motion/text feature distance exceeds tau.
    FilterCaptions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn opt<T: std::fmt::Display>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={v}"))
}

fn resolve(common: &Common, flags: impl IntoIterator<Item = Option<String>>) -> Result<PipelineConfig, CliError> {
    let mut overrides = common.overrides.clone();
    overrides.extend(flags.into_iter().flatten());
    PipelineConfig::resolve(common.config.as_deref(), &overrides)
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mdd: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::MakeSynthetic { out, seed, common } => {
            let cfg = resolve(&common, [opt("seed", &seed)])?;
            commands::make_synthetic(&cfg, &out)
        }
        Command::Preprocess { input, output, seed, common } => {
            let cfg = resolve(&common, [opt("seed", &seed)])?;
            commands::preprocess(&cfg, &input, &output)
        }
        Command::TrainVq { data, out, seed, steps, common } => {
            let cfg = resolve(&common, [opt("vq.seed", &seed), opt("vq.steps", &steps)])?;
            commands::train_vq(&cfg, &data, &out)
        }
        Command::TrainDenoiser { data, vq, out, seed, steps, common } => {
            let cfg = resolve(&common, [opt("denoiser.train.seed", &seed), opt("denoiser.train.steps", &steps)])?;
            commands::train_denoiser(&cfg, &data, &vq, &out)
        }
        Command::Generate {
            vq,
            denoiser,
            text,
            length,
            scale,
            steps,
            seed,
            out,
            joints,
            tokens,
            common,
        } => {
            let cfg = resolve(
                &common,
                [opt("generate.scale", &scale), opt("generate.steps", &steps), opt("generate.seed", &seed)],
            )?;
            commands::generate(&cfg, &vq, &denoiser, text.as_deref(), length, &out, joints.as_deref(), tokens.as_deref())
        }
        Command::Evaluate { data, vq, denoiser, out, seed, common } => {
            let cfg = resolve(&common, [opt("generate.seed", &seed)])?;
            commands::evaluate(&cfg, &data, &vq, &denoiser, &out)
        }
        Command::FilterCaptions { data, tau, out, common } => {
            let cfg = resolve(&common, [opt("filter.tau", &tau)])?;
            commands::filter_captions(&cfg, &data, &out)
        }
    }
}
