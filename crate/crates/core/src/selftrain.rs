//! Three-stage training: hard-EM mixture fit on distant labels (optionally
//! with fair assignment), then teacher-student self-training on ensemble
//! pseudo-labels with best-dev checkpointing.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{repair_tags, Corpus, Layer, TagSequence};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::fairness::FairConfig;
use crate::moe::{
    assign_step, ensemble_predict, format_histogram, moe_loss, moe_round, score_tagged, train_assigned, Assignment,
    ExpertPool, MoeRound,
};
use crate::scalar::Scalar;
use crate::tagger::{decode, Example, LabelDistribution, Targets, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoMode {
    Soft,
    Hard,
}

impl FromStr for PseudoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(PseudoMode::Soft),
            "hard" => Ok(PseudoMode::Hard),
            other => Err(Error::InvalidConfig(format!(
                "mode must be soft or hard, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for PseudoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoMode::Soft => "soft",
            PseudoMode::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainConfig {
    /// Stage-1 mixture rounds on distant labels.
    pub moe_rounds: usize,
    /// Self-training rounds; 0 stops after stage 1.
    pub rounds: usize,
    /// Rounds between teacher refreshes.
    pub teacher_period: usize,
    pub mode: PseudoMode,
    /// Hard mode only: tokens whose ensemble confidence is below this are masked.
    pub confidence_threshold: f64,
    pub reassign_each_round: bool,
    pub fair: bool,
    pub early_stop_patience: usize,
    pub dev_fraction: f64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            moe_rounds: 20,
            rounds: 20,
            teacher_period: 1,
            mode: PseudoMode::Soft,
            confidence_threshold: 0.9,
            reassign_each_round: true,
            fair: true,
            early_stop_patience: 3,
            dev_fraction: 0.1,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.moe_rounds == 0 {
            return Err(Error::InvalidConfig("moe_rounds must be >= 1".into()));
        }
        if self.teacher_period == 0 {
            return Err(Error::InvalidConfig("teacher_period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig("confidence_threshold must lie in [0, 1]".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::InvalidConfig("dev_fraction must lie in (0, 1)".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig("early_stop_patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seeded document-level split into (train, held-out). Both sides keep corpus order.
pub fn split_dev(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig("split fraction must lie in (0, 1)".into()));
    }
    let n = corpus.len();
    let held = (fraction * n as f64).round() as usize;
    if held == 0 || held >= n {
        return Err(Error::InvalidConfig(format!(
            "splitting {n} documents at fraction {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev: Vec<usize> = order[..held].to_vec();
    let mut train: Vec<usize> = order[held..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    Ok((corpus.subset(&train), corpus.subset(&dev)))
}

/// Teacher output for every document of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoLabels<T> {
    Soft(Vec<Vec<LabelDistribution<T>>>),
    Hard {
        tags: Vec<TagSequence>,
        confidence: Vec<Vec<T>>,
        /// `true` marks tokens excluded from the student loss.
        masked: Vec<Vec<bool>>,
    },
}

impl<T: Scalar> PseudoLabels<T> {
    pub fn len(&self) -> usize {
        match self {
            PseudoLabels::Soft(d) => d.len(),
            PseudoLabels::Hard { tags, .. } => tags.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decoded tags (argmax + repair for soft labels).
    pub fn hard_tags(&self) -> Vec<TagSequence> {
        match self {
            PseudoLabels::Soft(dists) => dists.iter().map(|d| decode(d)).collect(),
            PseudoLabels::Hard { tags, .. } => tags.clone(),
        }
    }

    pub fn masked_count(&self) -> usize {
        match self {
            PseudoLabels::Soft(_) => 0,
            PseudoLabels::Hard { masked, .. } => masked.iter().flatten().filter(|&&m| m).count(),
        }
    }

    fn examples<'a>(&'a self, corpus: &'a Corpus) -> Vec<Example<'a, T>> {
        corpus
            .documents()
            .iter()
            .enumerate()
            .map(|(i, doc)| Example {
                doc,
                targets: match self {
                    PseudoLabels::Soft(d) => Targets::Soft(&d[i]),
                    PseudoLabels::Hard { tags, masked, .. } => Targets::Masked(&tags[i], &masked[i]),
                },
            })
            .collect()
    }
}

/// Ensemble pseudo-labels: distributions verbatim (soft), or argmax + repair
/// with tokens below `confidence_threshold` masked (hard).
pub fn generate_pseudo_labels<T: Scalar>(
    teacher: &ExpertPool<T>,
    corpus: &Corpus,
    config: &SelfTrainConfig,
) -> PseudoLabels<T> {
    let dists: Vec<Vec<LabelDistribution<T>>> = corpus
        .documents()
        .par_iter()
        .map(|doc| ensemble_predict(teacher, doc))
        .collect();
    match config.mode {
        PseudoMode::Soft => PseudoLabels::Soft(dists),
        PseudoMode::Hard => {
            let threshold = T::lit(config.confidence_threshold);
            let mut tags = Vec::with_capacity(dists.len());
            let mut confidence = Vec::with_capacity(dists.len());
            let mut masked = Vec::with_capacity(dists.len());
            for doc in &dists {
                let raw = TagSequence::new(doc.iter().map(LabelDistribution::argmax).collect());
                tags.push(repair_tags(&raw));
                let conf: Vec<T> = doc.iter().map(LabelDistribution::max).collect();
                masked.push(conf.iter().map(|&c| c < threshold).collect());
                confidence.push(conf);
            }
            PseudoLabels::Hard {
                tags,
                confidence,
                masked,
            }
        }
    }
}

/// Trains each student expert on its assigned documents against the pseudo-labels.
pub fn student_update<T: Scalar>(
    student: &mut ExpertPool<T>,
    pseudo: &PseudoLabels<T>,
    corpus: &Corpus,
    assign: &Assignment,
    config: &TrainConfig,
) -> Result<Vec<Option<T>>> {
    if pseudo.len() != corpus.len() {
        return Err(Error::LengthMismatch {
            expected: corpus.len(),
            found: pseudo.len(),
        });
    }
    let same_docs = assign.doc_ids().len() == corpus.len()
        && assign
            .doc_ids()
            .iter()
            .zip(corpus.documents())
            .all(|(a, d)| a == d.id());
    if !same_docs {
        return Err(Error::Contract("assignment does not cover the corpus".into()));
    }
    train_assigned(student, assign, &pseudo.examples(corpus), config)
}

/// Deep copy of the student; later student updates never touch it.
pub fn teacher_refresh<T: Scalar>(student: &ExpertPool<T>) -> ExpertPool<T> {
    student.clone()
}

/// One line of the self-training history.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub dev_f1: f64,
    pub moe_loss: f64,
    pub histogram: Vec<usize>,
}

impl RoundRecord {
    /// `round<TAB>dev_f1<TAB>moe_loss<TAB>[h0,...]`
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.round,
            self.dev_f1,
            self.moe_loss,
            format_histogram(&self.histogram)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Parse {
            line: 0,
            message: format!("bad history line {line:?}"),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        let hist = fields[3]
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(bad)?;
        let histogram = if hist.is_empty() {
            Vec::new()
        } else {
            hist.split(',')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?
        };
        Ok(Self {
            round: fields[0].parse().map_err(|_| bad())?,
            dev_f1: fields[1].parse().map_err(|_| bad())?,
            moe_loss: fields[2].parse().map_err(|_| bad())?,
            histogram,
        })
    }
}

pub fn format_history(records: &[RoundRecord]) -> String {
    records.iter().map(|r| r.line() + "\n").collect()
}

pub fn parse_history(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(RoundRecord::parse)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome<T> {
    /// Best-dev checkpoint over `history`, or the best stage-1 pool when
    /// self-training is disabled.
    pub pool: ExpertPool<T>,
    /// Stage-1 rounds (dev F1 measured after each).
    pub stage1: Vec<RoundRecord>,
    /// Self-training rounds, led by a round-0 record for the stage-1
    /// checkpoint. Empty when self-training is disabled.
    pub history: Vec<RoundRecord>,
    /// Round of the returned checkpoint within `history` (0 = stage-1 checkpoint).
    pub best_round: Option<usize>,
    pub best_dev_f1: f64,
    pub final_assignment: Assignment,
    pub train: Corpus,
    pub dev: Corpus,
}

struct Best<T> {
    pool: ExpertPool<T>,
    round: usize,
    f1: f64,
    assignment: Assignment,
}

fn dev_f1<T: Scalar>(pool: &ExpertPool<T>, dev: &Corpus) -> Result<f64> {
    let f1 = evaluate(pool, dev, Layer::Distant, true)?.f1;
    if !f1.is_finite() {
        return Err(Error::NonFinite("dev F1"));
    }
    Ok(f1)
}

/// Full pipeline on a corpus with distant labels.
///
/// Stage 1 fits the mixture on the training split's distant labels for
/// `moe_rounds` rounds and keeps the best dev round (ties go to the later
/// round). Stage 3 then alternates teacher refresh, pseudo-labeling, optional
/// reassignment against hard pseudo-labels, and student updates. It returns
/// the history round with the highest dev F1 (earliest on ties) and stops
/// after `early_stop_patience` rounds without improvement.
pub fn self_train<T: Scalar>(
    pool: ExpertPool<T>,
    corpus: &Corpus,
    st_config: &SelfTrainConfig,
    fair_config: &FairConfig,
    train_config: &TrainConfig,
) -> Result<SelfTrainOutcome<T>> {
    st_config.validate()?;
    train_config.validate()?;
    fair_config.validate()?;
    corpus.layer(Layer::Distant)?;
    let fair = st_config.fair.then_some(fair_config);
    let (train, dev) = split_dev(corpus, st_config.dev_fraction, train_config.seed)?;

    // stage 1 (+ 2 when fair): every round runs, the best dev round is kept
    let mut pool = pool;
    let mut stage1 = Vec::new();
    let mut best: Option<Best<T>> = None;
    for round in 1..=st_config.moe_rounds {
        let MoeRound { loss, assignment, .. } =
            moe_round(&mut pool, &train, Layer::Distant, round, fair, train_config)?;
        let f1 = dev_f1(&pool, &dev)?;
        stage1.push(RoundRecord {
            round,
            dev_f1: f1,
            moe_loss: loss.as_f64(),
            histogram: assignment.histogram(),
        });
        if best.as_ref().is_none_or(|b| f1 >= b.f1) {
            best = Some(Best {
                pool: pool.clone(),
                round,
                f1,
                assignment,
            });
        }
    }
    let stage1_best = best.expect("at least one stage-1 round");
    if st_config.rounds == 0 {
        return Ok(SelfTrainOutcome {
            pool: stage1_best.pool,
            stage1,
            history: Vec::new(),
            best_round: None,
            best_dev_f1: stage1_best.f1,
            final_assignment: stage1_best.assignment,
            train,
            dev,
        });
    }

    // stage 3; round 0 is the stage-1 checkpoint, so the result never scores below it on dev
    let mut student = stage1_best.pool;
    let mut assignment = stage1_best.assignment;
    let mut history = vec![RoundRecord {
        round: 0,
        dev_f1: stage1_best.f1,
        moe_loss: moe_loss(&student, &train, Layer::Distant)?.as_f64(),
        histogram: assignment.histogram(),
    }];
    let mut best = Best {
        pool: student.clone(),
        round: 0,
        f1: stage1_best.f1,
        assignment: assignment.clone(),
    };
    let mut teacher = teacher_refresh(&student);
    let mut stale = 0;
    for round in 1..=st_config.rounds {
        if (round - 1) % st_config.teacher_period == 0 {
            teacher = teacher_refresh(&student);
        }
        let pseudo = generate_pseudo_labels(&teacher, &train, st_config);
        if st_config.reassign_each_round {
            let scores = score_tagged(&student, train.documents(), &pseudo.hard_tags())?;
            assignment = assign_step(&scores, fair)?.0;
        }
        let config = TrainConfig {
            seed: train_config.seed.wrapping_add((st_config.moe_rounds + round) as u64),
            ..train_config.clone()
        };
        student_update(&mut student, &pseudo, &train, &assignment, &config)?;

        let f1 = dev_f1(&student, &dev)?;
        history.push(RoundRecord {
            round,
            dev_f1: f1,
            moe_loss: moe_loss(&student, &train, Layer::Distant)?.as_f64(),
            histogram: assignment.histogram(),
        });
        if f1 > best.f1 {
            best = Best {
                pool: student.clone(),
                round,
                f1,
                assignment: assignment.clone(),
            };
            stale = 0;
        } else {
            stale += 1;
            if stale >= st_config.early_stop_patience {
                break;
            }
        }
    }

    let Best {
        pool,
        round: best_round,
        f1: best_dev_f1,
        assignment: final_assignment,
    } = best;
    Ok(SelfTrainOutcome {
        pool,
        stage1,
        history,
        best_round: Some(best_round),
        best_dev_f1,
        final_assignment,
        train,
        dev,
    })
}
