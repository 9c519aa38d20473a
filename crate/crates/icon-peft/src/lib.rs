//! Command line for the icon-peft laboratory: run configuration, dataset
//! readers, checkpoints and report files on top of `icon-peft-core`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Precision, RolloutInput};
use crate::config::{Preset, RunConfig};
use crate::error::{CliError, CliResult, EXIT_OK};

/// Environment variable capping intra-op threads (default 1).
pub const THREADS_ENV: &str = "ICON_PEFT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "icon-peft", version, about = "Parameter-efficient ViT adapters at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: vitb-like, tiny or grad-tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, default: Preset) -> CliResult<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => Preset::parse(name)?.run_config(),
            (None, None) => default.run_config(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured recipe and write metrics, checkpoint and parameter report.
    Train(Common),
    /// Accuracy and loss of a checkpoint on the evaluation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter counts for the configured recipe, every built-in recipe and a kernel sweep.
    CountParams(Common),
    /// Finite-difference check of every trainable parameter group.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Negative control: perturbs the matmul backward rule.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Attention-rollout map of one image as CSV and PGM.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PGM/PPM image.
        #[arg(long, conflicts_with = "index")]
        image: Option<PathBuf>,
        /// Sample of the evaluation split.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Print the resolved configuration.
    ShowConfig(Common),
}

/// Validates the thread cap and hands it to the matmul backend.
pub fn configure_threads() -> CliResult<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    };
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    Ok(n)
}

macro_rules! at_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => commands::$f::<f32>($($arg),*).map(|_| ()),
            Precision::F64 => commands::$f::<f64>($($arg),*).map(|_| ()),
        }
    };
}

fn dispatch(cli: Cli, w: &mut dyn Write) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load(Preset::Tiny)?;
            let out = c.out_dir(&cfg);
            at_precision!(c.precision, train_cmd(&cfg, &out, w))
        }
        Command::Evaluate { common: c, checkpoint } => {
            let cfg = c.load(Preset::Tiny)?;
            at_precision!(c.precision, evaluate_cmd(&cfg, &checkpoint, w))
        }
        Command::CountParams(c) => {
            let cfg = c.load(Preset::VitbLike)?;
            commands::count_params_cmd(&cfg, c.out.as_deref(), w).map(|_| ())
        }
        Command::GradCheck { common: c, corrupt_backward } => {
            let cfg = c.load(Preset::GradTiny)?;
            commands::grad_check_cmd(&cfg, c.precision, corrupt_backward, w).map(|_| ())
        }
        Command::Rollout {
            common: c,
            checkpoint,
            image,
            index,
        } => {
            let cfg = c.load(Preset::Tiny)?;
            let out = c.out_dir(&cfg);
            let input = match image {
                Some(p) => RolloutInput::Image(p),
                None => RolloutInput::Index(index.unwrap_or(0)),
            };
            at_precision!(c.precision, rollout_cmd(&cfg, &checkpoint, &input, &out, w))
        }
        Command::ShowConfig(c) => {
            let cfg = c.load(Preset::Tiny)?;
            commands::show_config_cmd(&cfg, w)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(stderr, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
