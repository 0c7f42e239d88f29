//! `are`: train, evaluate, and inspect region-embedding text classifiers.

mod commands;
mod config;
mod failure;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "are", version, about = "Region-embedding text classification", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, train, and write checkpoints, metrics, and a config snapshot to --out
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the state checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Report accuracy, loss, and confusion counts of --checkpoint on --test
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Print the parameter breakdown of a configuration
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Print JSON instead of a table
        #[arg(long)]
        json: bool,
    },
    /// Render per-token saliency of --checkpoint on a text
    Saliency {
        #[command(flatten)]
        common: Common,
        /// Text to analyse
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        /// File holding the text to analyse
        #[arg(long)]
        input: Option<PathBuf>,
        /// Gold label recorded in the report
        #[arg(long, default_value_t = 0)]
        label: usize,
    },
}

/// Flags shared by every subcommand; each overrides the same key from
/// --config.
#[derive(Args)]
struct Common {
    /// key = value file; flags win over it
    #[arg(long)]
    config: Option<PathBuf>,
    /// are, lre, or conv
    #[arg(long)]
    method: Option<String>,
    /// cnn, smallcnn, factoredcnn, lstm, gru, or ensemble
    #[arg(long)]
    meta: Option<String>,
    /// Embedding size
    #[arg(long)]
    h: Option<String>,
    /// Region size 2c+1
    #[arg(long)]
    region: Option<String>,
    /// Rank of the factored meta-network
    #[arg(long)]
    u: Option<String>,
    /// Vocabulary size (count-params)
    #[arg(long)]
    v: Option<String>,
    /// Number of classes
    #[arg(long)]
    n: Option<String>,
    /// Known benchmark name (count-params)
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Validate every this many steps; 0 validates once per epoch
    #[arg(long)]
    eval_every: Option<String>,
    /// Share of training documents held out for validation
    #[arg(long)]
    val_fraction: Option<String>,
    /// Stop after this many steps (resume later with --resume)
    #[arg(long)]
    max_steps: Option<String>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    min_count: Option<String>,
    /// Tokens kept per document
    #[arg(long)]
    max_len: Option<String>,
    /// Training CSV
    #[arg(long)]
    train: Option<String>,
    /// Test CSV
    #[arg(long)]
    test: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Vocabulary file; defaults to vocab.txt beside the checkpoint
    #[arg(long)]
    vocab: Option<String>,
    /// Saliency rendering: json, ansi, or html
    #[arg(long)]
    format: Option<String>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        let flags = [
            ("method", self.method),
            ("meta", self.meta),
            ("h", self.h),
            ("region", self.region),
            ("u", self.u),
            ("v", self.v),
            ("n", self.n),
            ("dataset", self.dataset),
            ("seed", self.seed),
            ("batch", self.batch),
            ("lr", self.lr),
            ("epochs", self.epochs),
            ("eval-every", self.eval_every),
            ("val-fraction", self.val_fraction),
            ("max-steps", self.max_steps),
            ("runs", self.runs),
            ("min-count", self.min_count),
            ("max-len", self.max_len),
            ("train", self.train),
            ("test", self.test),
            ("out", self.out),
            ("checkpoint", self.checkpoint),
            ("vocab", self.vocab),
            ("format", self.format),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                cfg.set(key, &value).map_err(|f| Failure::input(format!("--{key}: {}", f.message)))?;
            }
        }
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<String, Failure> {
    match command {
        Command::Train { common, resume } => commands::train(&common.resolve()?, resume),
        Command::Eval { common } => commands::eval(&common.resolve()?),
        Command::CountParams { common, json } => commands::count(&common.resolve()?, json),
        Command::Saliency { common, text, input, label } => {
            commands::saliency_report(&common.resolve()?, text.as_deref(), input.as_ref(), label)
        }
    }
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
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", Failure::input(first).to_line());
            return ExitCode::from(failure::EXIT_INPUT as u8);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_line());
            ExitCode::from(f.code as u8)
        }
    }
}
