//! Command-line pipeline: synthesize or list recordings, cache log-Mel
//! segments, train one model per held-out speaker, evaluate checkpoints and
//! dump per-stage feature maps.

mod cache;
mod commands;
mod config;
mod images;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use cache::{CachedSegment, FeatureCache};
pub use commands::{
    cmd_eval, cmd_extract, cmd_featuremaps, cmd_synth, cmd_train, EvalOptions, ExtractSummary, FeatureMapEntry,
    FoldSummary, SynthOptions, TrainOptions, TrainSummary,
};
pub use config::RunConfig;
pub use images::{read_matrix, write_matrix, write_pgm};
pub use manifest::{Manifest, ManifestEntry};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for bad or missing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) | Self::Io(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sswin", version, about = "Speech Swin-Transformer emotion recognition pipeline")]
pub struct Cli {
    /// TOML run configuration; paper defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-clip extraction and per-fold training.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VoteArg {
    Segment,
    Clip,
}

impl From<VoteArg> for speech_swin::train::Vote {
    fn from(v: VoteArg) -> Self {
        match v {
            VoteArg::Segment => Self::Segment,
            VoteArg::Clip => Self::Clip,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic tone corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        speakers: u32,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
    },
    /// Compute log-Mel segments for every manifest entry into one cache file.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-speaker-out training, one checkpoint per fold.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        vote: Option<VoteArg>,
    },
    /// Score a checkpoint on a cache.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        vote: Option<VoteArg>,
        /// Restrict to these speakers (comma separated names).
        #[arg(long, value_delimiter = ',')]
        speakers: Vec<String>,
    },
    /// Dump per-stage channel-mean feature maps for one recording.
    Featuremaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                let _ = e.print();
                return Ok(());
            }
            _ => {
                let msg = e.to_string();
                return Err(CliError::Usage(msg.trim_start_matches("error: ").trim_end().to_string()));
            }
        },
    };
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            speakers,
            seconds,
        } => {
            let opts = SynthOptions {
                classes,
                per_class,
                speakers,
                seconds,
            };
            let n = cmd_synth(&cfg, &out, &opts)?;
            println!("wrote {n} clips and {}", out.join("manifest.csv").display());
        }
        Command::Extract { manifest, out } => {
            let summary = cmd_extract(&cfg, &manifest, &out, cli.jobs)?;
            if summary.segments == 0 {
                eprintln!("warning: no segments extracted");
            }
            for (label, n) in &summary.per_class {
                println!("{label}: {n} segments");
            }
            println!("{} segments from {} clips -> {}", summary.segments, summary.clips, out.display());
        }
        Command::Train {
            cache,
            out,
            fold,
            epochs,
            batch_size,
            vote,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(v) = vote {
                cfg.train.vote = v.into();
            }
            cfg.validate()?;
            let opts = TrainOptions {
                fold,
                jobs: cli.jobs,
                verbose: true,
            };
            let summary = cmd_train(&cfg, &cache, &out, &opts)?;
            print!("{}", summary.table);
        }
        Command::Eval {
            checkpoint,
            cache,
            out,
            vote,
            speakers,
        } => {
            let opts = EvalOptions {
                vote: vote.map_or(cfg.train.vote, Into::into),
                speakers,
            };
            let report = cmd_eval(&cfg, &checkpoint, &cache, &out, &opts)?;
            print!("{}", report.to_table());
        }
        Command::Featuremaps { checkpoint, wav, out } => {
            let entries = cmd_featuremaps(&cfg, &checkpoint, &wav, &out)?;
            println!("wrote {} maps to {}", entries.len(), out.display());
        }
    }
    Ok(())
}
