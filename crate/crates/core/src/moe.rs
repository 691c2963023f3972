//! Hard-EM mixture of experts with document-level assignment.
//!
//! Every document is routed to exactly one expert per round. The routing score
//! is the token-averaged log-likelihood of the document's tags under each
//! expert; the prior over experts is uniform, so the posterior argmax and the
//! likelihood argmax coincide.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::corpus::{Corpus, Document, LabelSet, Layer, TagSequence};
use crate::error::{Error, Result};
use crate::fairness::{fair_assign, sinkhorn, to_scores, FairConfig, ScalingVectors};
use crate::scalar::Scalar;
use crate::tagger::{
    argmax, decode, init_expert, nll_from_distributions, train_epochs, Dims, Example, ExpertParams, LabelDistribution,
    Targets, TrainConfig, Vocabulary,
};

/// Seed for expert `index` of a pool seeded with `seed`. Expert 0 uses `seed` itself.
pub fn expert_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// K experts sharing one vocabulary and label set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool<T> {
    experts: Vec<ExpertParams<T>>,
    vocab: Arc<Vocabulary>,
    labels: Arc<LabelSet>,
}

impl<T: Scalar> ExpertPool<T> {
    pub fn new(experts: Vec<ExpertParams<T>>, vocab: Arc<Vocabulary>, labels: Arc<LabelSet>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::InvalidConfig("expert pool needs at least one expert".into()))?;
        for e in &experts {
            if e.dims() != first.dims() || e.vocab_size() != vocab.len() || e.tag_count() != labels.tag_count() {
                return Err(Error::Shape("experts are not dimensionally identical".into()));
            }
        }
        Ok(Self { experts, vocab, labels })
    }

    /// Independently seeded experts (see [`expert_seed`]).
    pub fn init(vocab: Vocabulary, labels: LabelSet, k: usize, dims: Dims, seed: u64) -> Result<Self> {
        let experts = (0..k)
            .map(|z| init_expert(&vocab, &labels, dims, expert_seed(seed, z)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(experts, Arc::new(vocab), Arc::new(labels))
    }

    /// K copies of the same expert.
    pub fn init_identical(vocab: Vocabulary, labels: LabelSet, k: usize, dims: Dims, seed: u64) -> Result<Self> {
        let expert = init_expert(&vocab, &labels, dims, seed)?;
        Self::new(vec![expert; k], Arc::new(vocab), Arc::new(labels))
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn prior(&self) -> T {
        T::one() / T::from_usize(self.k()).unwrap()
    }

    pub fn experts(&self) -> &[ExpertParams<T>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [ExpertParams<T>] {
        &mut self.experts
    }

    pub fn expert(&self, z: usize) -> &ExpertParams<T> {
        &self.experts[z]
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    /// Pool with one more expert appended.
    pub fn with_expert(&self, expert: ExpertParams<T>) -> Result<Self> {
        let mut experts = self.experts.clone();
        experts.push(expert);
        Self::new(experts, self.vocab.clone(), self.labels.clone())
    }
}

/// Token-averaged log-likelihood of each document (rows) under each expert (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LogScoreMatrix<T> {
    pub values: Array2<T>,
    pub doc_ids: Vec<String>,
}

impl<T: Scalar> LogScoreMatrix<T> {
    /// Wraps raw scores; document ids default to `doc{i}`.
    pub fn from_array(values: Array2<T>) -> Self {
        let doc_ids = (0..values.nrows()).map(|i| format!("doc{i}")).collect();
        Self { values, doc_ids }
    }

    pub fn num_docs(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.values.ncols()
    }
}

/// Posterior `p(z | x, y)` under the uniform prior, one row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix<T>(pub Array2<T>);

/// Hard document-to-expert map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    doc_ids: Vec<String>,
    experts: Vec<usize>,
    k: usize,
}

impl Assignment {
    pub fn new(doc_ids: Vec<String>, experts: Vec<usize>, k: usize) -> Result<Self> {
        if doc_ids.len() != experts.len() {
            return Err(Error::LengthMismatch {
                expected: doc_ids.len(),
                found: experts.len(),
            });
        }
        if experts.iter().any(|&z| z >= k) {
            return Err(Error::Shape(format!("expert index out of range 0..{k}")));
        }
        Ok(Self { doc_ids, experts, k })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn experts(&self) -> &[usize] {
        &self.experts
    }

    pub fn expert_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| self.experts[i])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.k];
        for &z in &self.experts {
            h[z] += 1;
        }
        h
    }

    /// Document positions assigned to expert `z`.
    pub fn members(&self, z: usize) -> Vec<usize> {
        (0..self.experts.len()).filter(|&i| self.experts[i] == z).collect()
    }

    fn covers(&self, corpus: &Corpus) -> Result<()> {
        let same =
            self.doc_ids.len() == corpus.len() && self.doc_ids.iter().zip(corpus.documents()).all(|(a, d)| a == d.id());
        if same {
            Ok(())
        } else {
            Err(Error::Contract("assignment does not cover the corpus".into()))
        }
    }
}

/// Token-summed nll of every document under every expert.
pub(crate) fn nll_matrix<T: Scalar>(
    pool: &ExpertPool<T>,
    docs: &[Document],
    tags: &[TagSequence],
) -> Result<Array2<T>> {
    if docs.len() != tags.len() {
        return Err(Error::LengthMismatch {
            expected: docs.len(),
            found: tags.len(),
        });
    }
    for (d, t) in docs.iter().zip(tags) {
        if d.len() != t.len() {
            return Err(Error::LengthMismatch {
                expected: d.len(),
                found: t.len(),
            });
        }
    }
    let k = pool.k();
    let rows: Vec<Vec<T>> = docs
        .par_iter()
        .zip(tags.par_iter())
        .map(|(doc, t)| {
            let ids = pool.vocab.encode(doc);
            pool.experts
                .iter()
                .map(|e| nll_from_distributions(&e.forward_ids(&ids), t))
                .collect()
        })
        .collect();
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((docs.len(), k), flat).expect("rows have K entries"))
}

pub(crate) fn score_tagged<T: Scalar>(
    pool: &ExpertPool<T>,
    docs: &[Document],
    tags: &[TagSequence],
) -> Result<LogScoreMatrix<T>> {
    let mut values = nll_matrix(pool, docs, tags)?;
    for (mut row, doc) in values.rows_mut().into_iter().zip(docs) {
        let n = T::from_usize(doc.len()).unwrap();
        row.mapv_inplace(|x| -x / n);
    }
    Ok(LogScoreMatrix {
        values,
        doc_ids: docs.iter().map(|d| d.id().to_string()).collect(),
    })
}

/// Scores every document of `corpus` against its `layer` tags.
pub fn score_documents<T: Scalar>(pool: &ExpertPool<T>, corpus: &Corpus, layer: Layer) -> Result<LogScoreMatrix<T>> {
    score_tagged(pool, corpus.documents(), corpus.layer(layer)?)
}

/// Row-wise softmax of the scores.
pub fn posterior<T: Scalar>(scores: &LogScoreMatrix<T>) -> ResponsibilityMatrix<T> {
    let mut out = scores.values.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / sum);
    }
    ResponsibilityMatrix(out)
}

/// Per-document argmax of the scores, lowest expert index on ties.
pub fn e_step<T: Scalar>(scores: &LogScoreMatrix<T>) -> Assignment {
    let experts = scores
        .values
        .rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect();
    Assignment {
        doc_ids: scores.doc_ids.clone(),
        experts,
        k: scores.num_experts(),
    }
}

/// Trains each expert on the examples assigned to it; starved experts are untouched.
/// Returns each expert's final epoch loss, `None` when it had no documents.
pub(crate) fn train_assigned<T: Scalar>(
    pool: &mut ExpertPool<T>,
    assign: &Assignment,
    examples: &[Example<'_, T>],
    config: &TrainConfig,
) -> Result<Vec<Option<T>>> {
    config.validate()?;
    if assign.len() != examples.len() || assign.k() != pool.k() {
        return Err(Error::Contract("assignment does not match pool and examples".into()));
    }
    let vocab = pool.vocab.clone();
    pool.experts
        .par_iter_mut()
        .enumerate()
        .map(|(z, expert)| {
            let mine: Vec<Example<'_, T>> = assign.members(z).into_iter().map(|i| examples[i]).collect();
            if mine.is_empty() {
                return Ok(None);
            }
            let losses = train_epochs(expert, &vocab, &mine, config)?;
            Ok(losses.last().copied())
        })
        .collect()
}

/// M-step: `config.epochs` passes of training per expert over its assigned documents.
pub fn m_step<T: Scalar>(
    pool: &mut ExpertPool<T>,
    assign: &Assignment,
    corpus: &Corpus,
    layer: Layer,
    config: &TrainConfig,
) -> Result<Vec<Option<T>>> {
    assign.covers(corpus)?;
    let tags = corpus.layer(layer)?;
    let examples: Vec<Example<'_, T>> = corpus
        .documents()
        .iter()
        .zip(tags)
        .map(|(doc, t)| Example {
            doc,
            targets: Targets::Hard(t),
        })
        .collect();
    train_assigned(pool, assign, &examples, config)
}

pub(crate) fn moe_loss_tagged<T: Scalar>(pool: &ExpertPool<T>, docs: &[Document], tags: &[TagSequence]) -> Result<T> {
    let nll = nll_matrix(pool, docs, tags)?;
    if docs.is_empty() {
        return Ok(T::zero());
    }
    let total: T = nll
        .rows()
        .into_iter()
        .map(|row| row.iter().copied().fold(T::infinity(), T::min))
        .sum();
    Ok(total / T::from_usize(docs.len()).unwrap())
}

/// Mean over documents of the smallest per-expert document nll.
pub fn moe_loss<T: Scalar>(pool: &ExpertPool<T>, corpus: &Corpus, layer: Layer) -> Result<T> {
    moe_loss_tagged(pool, corpus.documents(), corpus.layer(layer)?)
}

/// Unweighted mean of the experts' per-token distributions.
pub fn ensemble_predict<T: Scalar>(pool: &ExpertPool<T>, doc: &Document) -> Vec<LabelDistribution<T>> {
    let ids = pool.vocab.encode(doc);
    let k = T::from_usize(pool.k()).unwrap();
    let mut acc: Vec<Vec<T>> = vec![vec![T::zero(); pool.labels.tag_count()]; ids.len()];
    for expert in &pool.experts {
        for (sum, dist) in acc.iter_mut().zip(expert.forward_ids(&ids)) {
            for (s, &p) in sum.iter_mut().zip(dist.as_slice()) {
                *s += p;
            }
        }
    }
    acc.into_iter()
        .map(|v| LabelDistribution::from_raw(v.into_iter().map(|s| s / k).collect()))
        .collect()
}

/// Decoded tags for every document, from the ensemble or from expert 0 alone.
pub fn predict_corpus<T: Scalar>(pool: &ExpertPool<T>, corpus: &Corpus, use_ensemble: bool) -> Vec<TagSequence> {
    corpus
        .documents()
        .par_iter()
        .map(|doc| {
            if use_ensemble {
                decode(&ensemble_predict(pool, doc))
            } else {
                decode(&pool.experts[0].forward_ids(&pool.vocab.encode(doc)))
            }
        })
        .collect()
}

/// Assignment step shared by MoE rounds and self-training reassignment.
pub(crate) fn assign_step<T: Scalar>(
    scores: &LogScoreMatrix<T>,
    fair: Option<&FairConfig>,
) -> Result<(Assignment, Option<ScalingVectors<T>>)> {
    match fair {
        None => Ok((e_step(scores), None)),
        Some(cfg) => {
            let (vectors, scaled) = sinkhorn(&to_scores(scores, cfg), cfg)?;
            Ok((fair_assign(&scaled), Some(vectors)))
        }
    }
}

/// One line of the MoE training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeRound<T> {
    pub round: usize,
    pub loss: T,
    pub assignment: Assignment,
    pub expert_losses: Vec<Option<T>>,
    pub scaling: Option<ScalingVectors<T>>,
}

impl<T: Scalar> MoeRound<T> {
    /// `round<TAB>moe_loss<TAB>[h0,...,hK-1]`
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.round,
            self.loss,
            format_histogram(&self.assignment.histogram())
        )
    }
}

pub fn format_histogram(h: &[usize]) -> String {
    let parts: Vec<String> = h.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(","))
}

/// Score, assign (plain or fair), then train. `round` is 1-based and perturbs the
/// shuffling seed so rounds do not replay the same batch order.
pub(crate) fn moe_round<T: Scalar>(
    pool: &mut ExpertPool<T>,
    corpus: &Corpus,
    layer: Layer,
    round: usize,
    fair: Option<&FairConfig>,
    train_config: &TrainConfig,
) -> Result<MoeRound<T>> {
    let scores = score_documents(pool, corpus, layer)?;
    let (assignment, scaling) = assign_step(&scores, fair)?;
    let config = TrainConfig {
        seed: train_config.seed.wrapping_add(round as u64 - 1),
        ..train_config.clone()
    };
    let expert_losses = m_step(pool, &assignment, corpus, layer, &config)?;
    let loss = moe_loss(pool, corpus, layer)?;
    Ok(MoeRound {
        round,
        loss,
        assignment,
        expert_losses,
        scaling,
    })
}

/// Alternates assignment and M-steps for `rounds` rounds, training `pool` in place.
pub fn train_moe<T: Scalar>(
    pool: &mut ExpertPool<T>,
    corpus: &Corpus,
    layer: Layer,
    rounds: usize,
    fair: Option<&FairConfig>,
    train_config: &TrainConfig,
) -> Result<Vec<MoeRound<T>>> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be >= 1".into()));
    }
    if let Some(cfg) = fair {
        cfg.validate()?;
    }
    (1..=rounds)
        .map(|r| moe_round(pool, corpus, layer, r, fair, train_config))
        .collect()
}
