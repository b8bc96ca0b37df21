//! `socialalign`: the response-prediction pipeline as subcommands.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "socialalign", version, about = "Predict individual responses and topic-level sentiment distributions")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Stub,
    Provider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitUnit {
    Topic,
    User,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Model configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Retrieved history posts per prompt and persona.
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    /// Number of analyzing/writing expert pairs.
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    /// Comma-separated ablation flags.
    #[arg(long, global = true)]
    pub ablate: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Backend::Stub)]
    pub extractor: Backend,
    #[arg(long, global = true, value_enum, default_value_t = Backend::Stub)]
    pub classifier: Backend,
    /// Serve provider calls from recorded fixtures instead of the network.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop posts without a hashtag or with a noise keyword, then split.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        /// Noise keyword list; defaults to the bundled one.
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitUnit::Topic)]
        unit: SplitUnit,
    },
    /// Write a seeded synthetic corpus with splits.
    Synth {
        #[arg(long, default_value_t = 8)]
        topics: usize,
        #[arg(long, default_value_t = 60)]
        users: usize,
        #[arg(long, default_value_t = 12)]
        posts_per_user: usize,
        #[arg(long, value_enum, default_value_t = SplitUnit::User)]
        unit: SplitUnit,
    },
    /// BM25 top-k history posts for every topic response.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
    },
    /// Extract and store one persona per user.
    Persona {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the toy model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
    },
    /// Generate responses for every example of a split.
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
        /// train, valid, test or all.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Score generations at the individual and topic level.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generations: PathBuf,
    },
    /// Per-topic expert utilization of a trained model.
    Experts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
