//! Flat `key = value` run configuration.
//!
//! Every field of the training, fairness, self-training, model and synthetic
//! corpus settings is addressable by one key. Values are layered: defaults,
//! then a config file, then `--set key=value` pairs, then dedicated flags.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use moener::fairness::FairConfig;
use moener::selftrain::SelfTrainConfig;
use moener::synth::SynthSpec;
use moener::tagger::{Dims, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected `f32` or `f64`, found `{s}`")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 keeps the rayon default.
    pub threads: usize,
    pub k: usize,
    pub precision: Precision,
    /// Entity types in tag order; empty means infer from the input files.
    pub types: Vec<String>,
    pub dims: Dims,
    pub train: TrainConfig,
    pub fair: FairConfig,
    pub self_train: SelfTrainConfig,
    pub synth: SynthSpec,
    pub gold: Option<PathBuf>,
    pub distant: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            k: 4,
            precision: Precision::F64,
            types: Vec::new(),
            dims: Dims::default(),
            train: TrainConfig::default(),
            fair: FairConfig::default(),
            self_train: SelfTrainConfig::default(),
            synth: SynthSpec::default(),
            gold: None,
            distant: None,
            gazetteer: None,
            out_dir: None,
        }
    }
}

/// Every recognized key, in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "k",
    "precision",
    "types",
    "window",
    "emb_dim",
    "hidden_dim",
    "learning_rate",
    "epochs",
    "batch_size",
    "l2",
    "epsilon_floor",
    "tolerance",
    "max_iters",
    "moe_rounds",
    "rounds",
    "teacher_period",
    "mode",
    "confidence_threshold",
    "reassign_each_round",
    "fair",
    "early_stop_patience",
    "dev_fraction",
    "num_clusters",
    "docs_per_cluster",
    "min_doc_len",
    "max_doc_len",
    "vocab_per_cluster",
    "names_per_type",
    "entity_types",
    "max_entity_len",
    "entity_rates",
    "type_skew",
    "shared_names",
    "noise_rate",
    "gold",
    "distant",
    "gazetteer",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "types" => self.types = parse_list(key, v)?,
            "window" => self.dims.window = parse(key, v)?,
            "emb_dim" => self.dims.emb_dim = parse(key, v)?,
            "hidden_dim" => self.dims.hidden_dim = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "l2" => self.train.l2 = parse(key, v)?,
            "epsilon_floor" => self.fair.epsilon_floor = parse(key, v)?,
            "tolerance" => self.fair.tolerance = parse(key, v)?,
            "max_iters" => self.fair.max_iters = parse(key, v)?,
            "moe_rounds" => self.self_train.moe_rounds = parse(key, v)?,
            "rounds" => self.self_train.rounds = parse(key, v)?,
            "teacher_period" => self.self_train.teacher_period = parse(key, v)?,
            "mode" => self.self_train.mode = parse(key, v)?,
            "confidence_threshold" => self.self_train.confidence_threshold = parse(key, v)?,
            "reassign_each_round" => self.self_train.reassign_each_round = parse(key, v)?,
            "fair" => self.self_train.fair = parse(key, v)?,
            "early_stop_patience" => self.self_train.early_stop_patience = parse(key, v)?,
            "dev_fraction" => self.self_train.dev_fraction = parse(key, v)?,
            "num_clusters" => self.synth.num_clusters = parse(key, v)?,
            "docs_per_cluster" => self.synth.docs_per_cluster = parse(key, v)?,
            "min_doc_len" => self.synth.min_doc_len = parse(key, v)?,
            "max_doc_len" => self.synth.max_doc_len = parse(key, v)?,
            "vocab_per_cluster" => self.synth.vocab_per_cluster = parse(key, v)?,
            "names_per_type" => self.synth.names_per_type = parse(key, v)?,
            "entity_types" => self.synth.entity_types = parse_list(key, v)?,
            "max_entity_len" => self.synth.max_entity_len = parse(key, v)?,
            "entity_rates" => self.synth.entity_rates = parse_list(key, v)?,
            "type_skew" => self.synth.type_skew = parse(key, v)?,
            "shared_names" => self.synth.shared_names = parse(key, v)?,
            "noise_rate" => self.synth.noise_rate = parse(key, v)?,
            "gold" => self.gold = path(v),
            "distant" => self.distant = path(v),
            "gazetteer" => self.gazetteer = path(v),
            "out_dir" => self.out_dir = path(v),
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "k" => self.k.to_string(),
            "precision" => self.precision.to_string(),
            "types" => join(&self.types),
            "window" => self.dims.window.to_string(),
            "emb_dim" => self.dims.emb_dim.to_string(),
            "hidden_dim" => self.dims.hidden_dim.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "l2" => self.train.l2.to_string(),
            "epsilon_floor" => self.fair.epsilon_floor.to_string(),
            "tolerance" => self.fair.tolerance.to_string(),
            "max_iters" => self.fair.max_iters.to_string(),
            "moe_rounds" => self.self_train.moe_rounds.to_string(),
            "rounds" => self.self_train.rounds.to_string(),
            "teacher_period" => self.self_train.teacher_period.to_string(),
            "mode" => self.self_train.mode.to_string(),
            "confidence_threshold" => self.self_train.confidence_threshold.to_string(),
            "reassign_each_round" => self.self_train.reassign_each_round.to_string(),
            "fair" => self.self_train.fair.to_string(),
            "early_stop_patience" => self.self_train.early_stop_patience.to_string(),
            "dev_fraction" => self.self_train.dev_fraction.to_string(),
            "num_clusters" => self.synth.num_clusters.to_string(),
            "docs_per_cluster" => self.synth.docs_per_cluster.to_string(),
            "min_doc_len" => self.synth.min_doc_len.to_string(),
            "max_doc_len" => self.synth.max_doc_len.to_string(),
            "vocab_per_cluster" => self.synth.vocab_per_cluster.to_string(),
            "names_per_type" => self.synth.names_per_type.to_string(),
            "entity_types" => join(&self.synth.entity_types),
            "max_entity_len" => self.synth.max_entity_len.to_string(),
            "entity_rates" => join(&self.synth.entity_rates),
            "type_skew" => self.synth.type_skew.to_string(),
            "shared_names" => self.synth.shared_names.to_string(),
            "noise_rate" => self.synth.noise_rate.to_string(),
            "gold" => show_path(&self.gold),
            "distant" => show_path(&self.distant),
            "gazetteer" => show_path(&self.gazetteer),
            "out_dir" => show_path(&self.out_dir),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_pair(&mut self, pair: &str) -> CliResult<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, found `{pair}`")))?;
        self.set(key.trim(), value)
    }

    /// Every key with its current value; [`RunConfig::apply_text`] reads it back.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.k == 0 {
            return Err(CliError::Usage("k must be >= 1".into()));
        }
        if self.dims.emb_dim == 0 || self.dims.hidden_dim == 0 {
            return Err(CliError::Usage("emb_dim and hidden_dim must be >= 1".into()));
        }
        self.train.validate()?;
        self.fair.validate()?;
        self.self_train.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("k = 2\nlearning_rate=0.3 # comment\nmode = hard\nentity_rates = 0.25, 0.04\ngold = a/b.conll\n")
            .unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.synth.entity_rates, vec![0.25, 0.04]);
        let mut back = RunConfig::default();
        back.apply_text(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::default().dump().lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::default();
        for k in KEYS {
            let mut c = RunConfig::default();
            c.set(k, &d.get(k).unwrap()).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn errors_are_usage_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(CliError::Usage(_))));
        assert!(matches!(c.set("k", "two"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("k 2"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_pair("k"), Err(CliError::Usage(_))));
        c.set("k", "0").unwrap();
        assert!(c.validate().is_err());
    }
}
