//! Command-line driver: synthetic corpora, distant labeling, training,
//! evaluation and prediction.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moener::corpus::Layer;

use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "moener",
    version,
    about = "Distantly supervised NER with a fair mixture of experts"
)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Override a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a clustered corpus with gold and noisy distant layers.
    Synth(SynthArgs),
    /// Tag a corpus by gazetteer matching.
    DistantLabel(DistantLabelArgs),
    /// Fit the expert mixture and self-train it on a distantly labeled corpus.
    Train(TrainArgs),
    /// Score a checkpoint against a reference layer.
    Eval(EvalArgs),
    /// Write ensemble predictions in CoNLL format.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for gold.conll, distant.conll, gazetteer.tsv, clusters.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub docs_per_cluster: Option<usize>,
    /// Distant-label corruption rate.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistantLabelArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus; its tag column is the distant layer.
    #[arg(long)]
    pub distant: Option<PathBuf>,
    /// Optional gold tags for the same tokens, reported after training.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of experts.
    #[arg(long)]
    pub k: Option<usize>,
    /// Pseudo-label mode (soft or hard).
    #[arg(long)]
    pub mode: Option<String>,
    /// Single expert.
    #[arg(long)]
    pub no_moe: bool,
    /// Plain hard-EM assignment.
    #[arg(long)]
    pub no_fair: bool,
    /// Stop after the mixture stage.
    #[arg(long)]
    pub no_self_train: bool,
    /// Write the final scaled score matrix and scaling vectors here.
    #[arg(long, value_name = "PATH")]
    pub dump_fair: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    Gold,
    Distant,
}

impl From<LayerArg> for Layer {
    fn from(l: LayerArg) -> Layer {
        match l {
            LayerArg::Gold => Layer::Gold,
            LayerArg::Distant => Layer::Distant,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub distant: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gold")]
    pub reference: LayerArg,
    /// Also print one line per entity type.
    #[arg(long)]
    pub per_type: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Defaults, then the config file, then `--set` pairs, then global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| e.at(path))?;
    }
    for pair in &cli.overrides {
        cfg.apply_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let mut cfg = resolve_config(&cli)?;
    if let Command::Train(a) = &cli.command {
        apply_train_flags(&mut cfg, a)?;
    }
    if let Command::Synth(a) = &cli.command {
        cfg.synth.num_clusters = a.clusters.unwrap_or(cfg.synth.num_clusters);
        cfg.synth.docs_per_cluster = a.docs_per_cluster.unwrap_or(cfg.synth.docs_per_cluster);
        cfg.synth.noise_rate = a.noise.unwrap_or(cfg.synth.noise_rate);
    }
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    workers.install(|| match &cli.command {
        Command::Synth(a) => commands::synth(&cfg, &a.out, out),
        Command::DistantLabel(a) => {
            let gazetteer = a
                .gazetteer
                .clone()
                .or_else(|| cfg.gazetteer.clone())
                .ok_or_else(|| CliError::Usage("missing gazetteer path".into()))?;
            commands::distant_label(&cfg, &a.corpus, &gazetteer, &a.out, out)
        }
        Command::Train(a) => commands::train(&cfg, a.dump_fair.as_deref(), out),
        Command::Eval(a) => commands::eval(
            &a.model,
            a.gold.as_deref().or(cfg.gold.as_deref()),
            a.distant.as_deref(),
            a.reference.into(),
            a.per_type,
            out,
        ),
        Command::Predict(a) => commands::predict(&a.model, &a.input, &a.out, out),
    })
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(p) = &a.distant {
        cfg.distant = Some(p.clone());
    }
    if let Some(p) = &a.gold {
        cfg.gold = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.out_dir = Some(p.clone());
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(m) = &a.mode {
        cfg.set("mode", m)?;
    }
    if a.no_moe {
        cfg.k = 1;
    }
    if a.no_fair {
        cfg.self_train.fair = false;
    }
    if a.no_self_train {
        cfg.self_train.rounds = 0;
    }
    Ok(())
}
