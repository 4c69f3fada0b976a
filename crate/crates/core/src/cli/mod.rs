//! `idhider synth|train|protect|evaluate`.

pub mod commands;
pub mod config;
pub mod fsutil;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::Domain;
use crate::error::{Error, Result};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "idhider", version, about = "Identity-preserving face appearance protection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set mapper.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Master seed. Defaults to the config, then IDHIDER_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Parser,
    Identity,
    /// Independent identity embedder used only for evaluation.
    Heldout,
    Generator,
    Mapper,
    Disennet,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parser => "parser",
            Stage::Identity => "identity",
            Stage::Heldout => "heldout",
            Stage::Generator => "generator",
            Stage::Mapper => "mapper",
            Stage::Disennet => "disennet",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Parser | Stage::Identity | Stage::Heldout | Stage::Generator => &[],
            Stage::Mapper => &[Stage::Generator, Stage::Parser],
            Stage::Disennet => &[Stage::Mapper, Stage::Generator, Stage::Identity, Stage::Parser],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Holdout,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus into a content-addressed directory.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Parent directory; the corpus lands in `corpus-<hash>/` inside it.
        #[arg(long)]
        out: PathBuf,
        /// Number of records (overrides `corpus.count`).
        #[arg(long)]
        n: Option<u32>,
    },
    /// Train one stage and record it in the work directory.
    Train {
        #[command(flatten)]
        common: Common,
        stage: Stage,
        #[arg(long)]
        corpus: PathBuf,
        /// Holds one pointer file and one directory per trained stage.
        #[arg(long)]
        workdir: PathBuf,
        /// Overrides `<stage>.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Protect an image, a directory of PNGs, or a corpus split.
    Protect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workdir: PathBuf,
        /// A PNG, a directory of PNGs, or a corpus directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Share of the virtual face's attributes, from 0 (reconstruction) to 1.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Produce N style-mixed variants per input.
        #[arg(long)]
        diverse: Option<usize>,
        /// Paste the original background back around the protected face.
        #[arg(long)]
        keep_background: bool,
        /// Corpus split to protect; ignored for non-corpus inputs.
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Compare protected images against the originals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        original: PathBuf,
        /// Output of `protect` on the same corpus.
        #[arg(long)]
        protected: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Verification domains, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "orig,adr,xdr", value_parser = parse_domain)]
        domains: Vec<Domain>,
        #[arg(long, value_enum, default_value = "holdout")]
        split: Split,
    },
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    Domain::parse(s).ok_or_else(|| format!("unknown domain `{s}` (expected orig, adr or xdr)"))
}

/// Process environment the commands read.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub seed: Option<String>,
    /// Fixed clock for reproducible manifests.
    pub source_date_epoch: Option<String>,
}

impl Env {
    pub fn from_process() -> Self {
        Self {
            seed: std::env::var("IDHIDER_SEED").ok(),
            source_date_epoch: std::env::var("SOURCE_DATE_EPOCH").ok(),
        }
    }

    pub fn now(&self) -> u64 {
        if let Some(t) = self.source_date_epoch.as_deref().and_then(|s| s.trim().parse().ok()) {
            return t;
        }
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    }
}

pub fn execute(cli: &Cli, args: &[String], env: &Env) -> Result<RunManifest> {
    match &cli.command {
        Command::Synth { common, out, n } => commands::synth(common, out, *n, args, env),
        Command::Train {
            common,
            stage,
            corpus,
            workdir,
            steps,
        } => commands::train(common, *stage, corpus, workdir, *steps, args, env),
        Command::Protect {
            common,
            workdir,
            input,
            out,
            alpha,
            diverse,
            keep_background,
            split,
        } => {
            let flags = commands::ProtectFlags {
                alpha: *alpha,
                diverse: *diverse,
                keep_background: *keep_background,
                split: *split,
            };
            commands::protect_cmd(common, workdir, input, out, flags, args, env)
        }
        Command::Evaluate {
            common,
            workdir,
            original,
            protected,
            out,
            domains,
            split,
        } => commands::evaluate(common, workdir, original, protected, out, domains, *split, args, env).map(|r| r.0),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingPrerequisite { .. } => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

/// Parses and runs one command line (without the program name).
/// Returns the manifest, or an exit code and message.
pub fn run_args<S: AsRef<str>>(args: &[S], env: &Env) -> std::result::Result<RunManifest, (i32, String)> {
    let args: Vec<String> = args.iter().map(|a| a.as_ref().to_string()).collect();
    let cli = Cli::try_parse_from(std::iter::once("idhider".to_string()).chain(args.iter().cloned()))
        .map_err(|e| (if e.use_stderr() { 2 } else { 0 }, e.to_string()))?;
    execute(&cli, &args, env).map_err(|e| (exit_code(&e), e.to_string()))
}
