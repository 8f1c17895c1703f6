//! Command-line front end: dataset generation, training, evaluation,
//! inference, gradient checking and feature dumps.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::*;
pub use config::{parse_assignment, parse_text, Assignment, ConfigError, Predictor, RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "liftdepth", version, about = "Desk-scale monocular depth estimation with frame-subspace lifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to `data_dir` (or `--out`).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train on `data_dir`; writes the loss log and checkpoint under `out_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate `checkpoint` on `eval_dir`; writes reports under `out_dir/eval`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Predict depth for one PPM image.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Check every gradient of the 32x32 preset against central differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Distort the backward pass of this parameter.
        #[arg(long)]
        corrupt: Option<String>,
        /// Check a model without parameters.
        #[arg(long)]
        empty: bool,
        /// Finite-difference half-width.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Write frame, dgr, er-alpha or depth tensors as LFTD files under `out_dir/dump`.
    Dump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        what: String,
        /// PPM input; defaults to scene 0 of the configured spec.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Use freshly initialized parameters instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
}

/// Reads the config file and overrides into a [`RunConfig`].
pub fn resolve_config(args: &ConfigArgs, env_seed: Option<&str>) -> CliResult<RunConfig> {
    let mut items = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        items.extend(parse_text(&text, &path.display().to_string())?);
    }
    for s in &args.set {
        items.push(parse_assignment(s, "--set")?);
    }
    Ok(RunConfig::from_assignments(&items, env_seed)?)
}

fn dispatch(cmd: Command, env_seed: Option<&str>, out: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Gen { cfg, out: dir, workers } => {
            let c = resolve_config(&cfg, env_seed)?;
            let dir = dir.unwrap_or_else(|| c.data_dir.clone());
            cmd_gen(&c, &dir, workers, out)?;
        }
        Command::Train { cfg } => {
            cmd_train(&resolve_config(&cfg, env_seed)?, out)?;
        }
        Command::Eval { cfg, workers } => {
            cmd_eval(&resolve_config(&cfg, env_seed)?, workers, out)?;
        }
        Command::Infer { cfg, image, output } => {
            cmd_infer(&resolve_config(&cfg, env_seed)?, &image, &output, out)?;
        }
        Command::Gradcheck { cfg, corrupt, empty, eps } => {
            let c = resolve_config(&cfg, env_seed)?;
            let report = cmd_gradcheck(&c, &GradCheckRequest { corrupt, empty, eps }, out)?;
            if !report.passed() {
                return Ok(EXIT_FAILED);
            }
        }
        Command::Dump { cfg, what, image, untrained } => {
            let target = DumpTarget::parse(&what)?;
            let c = resolve_config(&cfg, env_seed)?;
            cmd_dump(&c, target, image.as_deref(), untrained, out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli.command, env_seed, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}
