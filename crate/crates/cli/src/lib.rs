//! The `pointtpa` command-line driver as a library, so that the same
//! dispatch can run in-process.
//!
//! Exit codes: 0 success, 1 usage, configuration or I/O error, 2 numerical
//! failure (divergence, non-finite values, failed gradient check).

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pointtpa", version, about = "Dynamic-prompt PEFT for a toy point transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration JSON; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    Gen {
        /// Preset name or scene spec JSON file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the spec's points per scene.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Pretrain the backbone and write it frozen.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Defaults to `io.pretrained`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Fine-tune the PEFT overlay and head on a frozen backbone.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Starting checkpoint; defaults to `io.pretrained`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Defaults to `io.checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Defaults to `io.loss_log`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Directory of `.ptbin`/`.ptxt` scenes instead of the generated split.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint and write the metrics JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Defaults to `io.metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable parameter of a miniature model.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the group assignment of a scene at one stage as CSV.
    Inspect {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scene: PathBuf,
        /// 1-based stage.
        #[arg(long)]
        stage: usize,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity of the per-group dynamic weights of one site.
    WeightsSim {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// 1-based stage holding the site.
        #[arg(long)]
        site: usize,
        /// Similarity CSV; defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Routing entropy CSV; defaults to standard error.
        #[arg(long)]
        entropy_out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(msg) = commands::init_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
