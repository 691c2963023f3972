//! Window-based feed-forward token classifier used as a single expert.
//!
//! Each token is represented by the concatenated embeddings of the `2w + 1`
//! tokens around it (PAD past the document edges, UNK for unseen words),
//! followed by one tanh hidden layer and a softmax over the tag vocabulary.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{repair_tags, Document, LabelSet, TagSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
const UNK_TOKEN: &str = "<unk>";
const PAD_TOKEN: &str = "<pad>";

/// Lowercased token index with reserved UNK and PAD entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary in order of first appearance.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let mut vocab = Self::from_tokens(Vec::new()).expect("reserved entries only");
        for doc in docs {
            for tok in doc.tokens() {
                let key = tok.to_lowercase();
                if !vocab.index.contains_key(&key) {
                    vocab.index.insert(key.clone(), vocab.tokens.len());
                    vocab.tokens.push(key);
                }
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its non-reserved entries, in index order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all = vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Entries after the reserved ones.
    pub fn entries(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, doc: &Document) -> Vec<usize> {
        doc.tokens().iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    /// Context radius `w`; each token sees `2w + 1` positions.
    pub window: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            window: 1,
            emb_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl Dims {
    pub fn input_dim(&self) -> usize {
        (2 * self.window + 1) * self.emb_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Normalized probability vector over the tag vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution<T>(Vec<T>);

impl<T: Scalar> LabelDistribution<T> {
    /// Wraps `probs` after checking they are non-negative and sum to one within 1e-6.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        let sum: T = probs.iter().copied().sum();
        if probs.iter().any(|p| p.is_nan() || *p < T::zero()) || (sum - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::Contract("label distribution is not normalized".into()));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(tag: usize, tag_count: usize) -> Self {
        let mut v = vec![T::zero(); tag_count];
        v[tag] = T::one();
        Self(v)
    }

    pub(crate) fn from_raw(probs: Vec<T>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> T {
        self.0[self.argmax()]
    }
}

/// First index of the maximum.
pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-token training target for one document.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    Hard(&'a TagSequence),
    /// Hard tags where `mask[i] == true` excludes token `i` from the loss.
    Masked(&'a TagSequence, &'a [bool]),
    Soft(&'a [LabelDistribution<T>]),
}

impl<T> Targets<'_, T> {
    fn len(&self) -> usize {
        match self {
            Targets::Hard(t) => t.len(),
            Targets::Masked(t, _) => t.len(),
            Targets::Soft(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    pub doc: &'a Document,
    pub targets: Targets<'a, T>,
}

/// Parameters of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    dims: Dims,
    seed: u64,
    /// `vocab_size x emb_dim`
    pub embedding: Array2<T>,
    /// `hidden_dim x input_dim`
    pub hidden_w: Array2<T>,
    pub hidden_b: Array1<T>,
    /// `tag_count x hidden_dim`
    pub output_w: Array2<T>,
    pub output_b: Array1<T>,
}

/// Parameter tensor names, in storage order.
pub const TENSOR_NAMES: [&str; 5] = ["embedding", "hidden_w", "hidden_b", "output_w", "output_b"];

/// Draws every parameter uniformly from `[-0.1, 0.1]` with ChaCha8 seeded by `seed`.
pub fn init_expert<T: Scalar>(vocab: &Vocabulary, labels: &LabelSet, dims: Dims, seed: u64) -> Result<ExpertParams<T>> {
    init_with_sizes(vocab.len(), labels.tag_count(), dims, seed)
}

pub(crate) fn init_with_sizes<T: Scalar>(
    vocab_size: usize,
    tag_count: usize,
    dims: Dims,
    seed: u64,
) -> Result<ExpertParams<T>> {
    if vocab_size == 0 || tag_count == 0 {
        return Err(Error::InvalidConfig(
            "vocabulary and label set must be non-empty".into(),
        ));
    }
    if dims.emb_dim == 0 || dims.hidden_dim == 0 {
        return Err(Error::InvalidConfig("emb_dim and hidden_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| T::lit(rng.random_range(-0.1..=0.1)));
    let embedding = draw(vocab_size, dims.emb_dim);
    let hidden_w = draw(dims.hidden_dim, dims.input_dim());
    let hidden_b = draw(1, dims.hidden_dim).into_shape_with_order(dims.hidden_dim).unwrap();
    let output_w = draw(tag_count, dims.hidden_dim);
    let output_b = draw(1, tag_count).into_shape_with_order(tag_count).unwrap();
    Ok(ExpertParams {
        dims,
        seed,
        embedding,
        hidden_w,
        hidden_b,
        output_w,
        output_b,
    })
}

/// Intermediate values of one token's forward pass, kept for backprop.
struct TokenCache<T> {
    context: Vec<usize>,
    input: Array1<T>,
    hidden: Array1<T>,
    probs: Vec<T>,
}

impl<T: Scalar> ExpertParams<T> {
    pub(crate) fn from_parts(
        dims: Dims,
        seed: u64,
        embedding: Array2<T>,
        hidden_w: Array2<T>,
        hidden_b: Array1<T>,
        output_w: Array2<T>,
        output_b: Array1<T>,
    ) -> Result<Self> {
        let p = Self {
            dims,
            seed,
            embedding,
            hidden_w,
            hidden_b,
            output_w,
            output_b,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        let ok = self.embedding.ncols() == d.emb_dim
            && self.embedding.nrows() > PAD
            && self.hidden_w.dim() == (d.hidden_dim, d.input_dim())
            && self.hidden_b.len() == d.hidden_dim
            && self.output_w.ncols() == d.hidden_dim
            && self.output_b.len() == self.output_w.nrows()
            && d.emb_dim > 0
            && d.hidden_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent expert tensor shapes".into()))
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn tag_count(&self) -> usize {
        self.output_b.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors as flat row-major slices, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[T]; 5] {
        [
            self.embedding.as_slice().expect("standard layout"),
            self.hidden_w.as_slice().expect("standard layout"),
            self.hidden_b.as_slice().expect("standard layout"),
            self.output_w.as_slice().expect("standard layout"),
            self.output_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.embedding.as_slice_mut().expect("standard layout"),
            self.hidden_w.as_slice_mut().expect("standard layout"),
            self.hidden_b.as_slice_mut().expect("standard layout"),
            self.output_w.as_slice_mut().expect("standard layout"),
            self.output_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            seed: self.seed,
            embedding: Array2::zeros(self.embedding.raw_dim()),
            hidden_w: Array2::zeros(self.hidden_w.raw_dim()),
            hidden_b: Array1::zeros(self.hidden_b.raw_dim()),
            output_w: Array2::zeros(self.output_w.raw_dim()),
            output_b: Array1::zeros(self.output_b.raw_dim()),
        }
    }

    fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size() {
            return Err(Error::Shape(format!(
                "vocabulary has {} entries, expert expects {}",
                vocab.len(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    fn context(&self, ids: &[usize], pos: usize) -> Vec<usize> {
        let w = self.dims.window as isize;
        (-w..=w)
            .map(|off| {
                let j = pos as isize + off;
                if j < 0 || j >= ids.len() as isize {
                    PAD
                } else {
                    ids[j as usize]
                }
            })
            .collect()
    }

    fn token_forward(&self, ids: &[usize], pos: usize) -> TokenCache<T> {
        let context = self.context(ids, pos);
        let e = self.dims.emb_dim;
        let mut input = Array1::zeros(self.dims.input_dim());
        for (slot, &id) in context.iter().enumerate() {
            input
                .slice_mut(ndarray::s![slot * e..(slot + 1) * e])
                .assign(&self.embedding.row(id));
        }
        let hidden = (self.hidden_w.dot(&input) + &self.hidden_b).mapv(T::tanh);
        let logits = self.output_w.dot(&hidden) + &self.output_b;
        let probs = softmax(logits.view());
        TokenCache {
            context,
            input,
            hidden,
            probs,
        }
    }

    pub(crate) fn forward_ids(&self, ids: &[usize]) -> Vec<LabelDistribution<T>> {
        (0..ids.len())
            .map(|pos| LabelDistribution(self.token_forward(ids, pos).probs))
            .collect()
    }

    /// Adds `loss_grad` (gradient of the loss w.r.t. the logits) back through the network.
    fn backward_token(&self, cache: &TokenCache<T>, logit_grad: &Array1<T>, grads: &mut Self) {
        for (c, &g) in logit_grad.iter().enumerate() {
            grads.output_w.row_mut(c).scaled_add(g, &cache.hidden);
        }
        grads.output_b += logit_grad;
        let hidden_grad = self.output_w.t().dot(logit_grad);
        let pre_grad = &hidden_grad * &cache.hidden.mapv(|h| T::one() - h * h);
        for (r, &g) in pre_grad.iter().enumerate() {
            grads.hidden_w.row_mut(r).scaled_add(g, &cache.input);
        }
        grads.hidden_b += &pre_grad;
        let input_grad = self.hidden_w.t().dot(&pre_grad);
        let e = self.dims.emb_dim;
        for (slot, &id) in cache.context.iter().enumerate() {
            grads
                .embedding
                .row_mut(id)
                .scaled_add(T::one(), &input_grad.slice(ndarray::s![slot * e..(slot + 1) * e]));
        }
    }
}

fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// Per-token label distributions for `doc`.
pub fn forward<T: Scalar>(
    expert: &ExpertParams<T>,
    doc: &Document,
    vocab: &Vocabulary,
) -> Result<Vec<LabelDistribution<T>>> {
    expert.check_vocab(vocab)?;
    if !expert.is_finite() {
        return Err(Error::NonFinite("expert parameters"));
    }
    Ok(expert.forward_ids(&vocab.encode(doc)))
}

/// `-sum_t log p(y_t)` with probabilities floored at [`PROB_FLOOR`].
pub fn nll<T: Scalar>(expert: &ExpertParams<T>, doc: &Document, tags: &TagSequence, vocab: &Vocabulary) -> Result<T> {
    if tags.len() != doc.len() {
        return Err(Error::LengthMismatch {
            expected: doc.len(),
            found: tags.len(),
        });
    }
    expert.check_vocab(vocab)?;
    let dists = expert.forward_ids(&vocab.encode(doc));
    Ok(nll_from_distributions(&dists, tags))
}

pub(crate) fn nll_from_distributions<T: Scalar>(dists: &[LabelDistribution<T>], tags: &[usize]) -> T {
    let floor = T::lit(PROB_FLOOR);
    dists.iter().zip(tags).map(|(d, &y)| -d.0[y].max(floor).ln()).sum()
}

/// Cross-entropy pieces for one step: mean token loss, the regularized
/// objective that the gradient belongs to, and the gradient itself.
pub struct LossAndGrad<T> {
    pub loss: T,
    pub objective: T,
    pub grad: ExpertParams<T>,
    pub tokens: usize,
}

/// Mean per-token cross-entropy over the batch plus `l2 / 2 * |theta|^2`, with its gradient.
pub fn loss_and_grad<T: Scalar>(
    expert: &ExpertParams<T>,
    vocab: &Vocabulary,
    batch: &[Example<'_, T>],
    l2: f64,
) -> Result<LossAndGrad<T>> {
    expert.check_vocab(vocab)?;
    let tag_count = expert.tag_count();
    let floor = T::lit(PROB_FLOOR);
    let mut grad = expert.zeros_like();
    let mut total = T::zero();
    let mut tokens = 0usize;
    let mut target = vec![T::zero(); tag_count];

    // accumulate unnormalized, rescale by the token count afterwards
    for ex in batch {
        if ex.targets.len() != ex.doc.len() {
            return Err(Error::LengthMismatch {
                expected: ex.doc.len(),
                found: ex.targets.len(),
            });
        }
        let ids = vocab.encode(ex.doc);
        for pos in 0..ids.len() {
            target.iter_mut().for_each(|t| *t = T::zero());
            match ex.targets {
                Targets::Hard(tags) => target[tags[pos]] = T::one(),
                Targets::Masked(tags, mask) => {
                    if mask[pos] {
                        continue;
                    }
                    target[tags[pos]] = T::one();
                }
                Targets::Soft(dists) => {
                    if dists[pos].len() != tag_count {
                        return Err(Error::Shape("soft target width differs from tag count".into()));
                    }
                    target.copy_from_slice(dists[pos].as_slice());
                }
            }
            let cache = expert.token_forward(&ids, pos);
            let mut kept_mass = T::zero();
            for (q, p) in target.iter().zip(&cache.probs) {
                total -= *q * p.max(floor).ln();
                if *p >= floor {
                    kept_mass += *q;
                }
            }
            let logit_grad = Array1::from_shape_fn(tag_count, |j| {
                let p = cache.probs[j];
                let q = if p >= floor { target[j] } else { T::zero() };
                kept_mass * p - q
            });
            expert.backward_token(&cache, &logit_grad, &mut grad);
            tokens += 1;
        }
    }

    let loss = if tokens == 0 {
        T::zero()
    } else {
        total / T::from_usize(tokens).unwrap()
    };
    let scale = if tokens == 0 {
        T::zero()
    } else {
        T::one() / T::from_usize(tokens).unwrap()
    };
    let l2 = T::lit(l2);
    let mut penalty = T::zero();
    for (g, p) in grad.tensors_mut().into_iter().zip(expert.tensors()) {
        for (gi, &pi) in g.iter_mut().zip(p) {
            *gi = *gi * scale + l2 * pi;
            penalty += pi * pi;
        }
    }
    Ok(LossAndGrad {
        loss,
        objective: loss + l2 * penalty / T::lit(2.0),
        grad,
        tokens,
    })
}

/// One full-batch gradient-descent step. Returns the pre-step mean token loss.
pub fn train_step<T: Scalar>(
    expert: &mut ExpertParams<T>,
    vocab: &Vocabulary,
    batch: &[Example<'_, T>],
    config: &TrainConfig,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let LossAndGrad { loss, grad, .. } = loss_and_grad(expert, vocab, batch, config.l2)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss is {loss}")));
    }
    let lr = T::lit(config.learning_rate);
    if lr != T::zero() {
        for (p, g) in expert.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pi, &gi) in p.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        }
    }
    if !expert.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(loss)
}

/// `config.epochs` passes over `examples` in seeded shuffled mini-batches.
/// Returns the mean step loss of each epoch.
pub fn train_epochs<T: Scalar>(
    expert: &mut ExpertParams<T>,
    vocab: &Vocabulary,
    examples: &[Example<'_, T>],
    config: &TrainConfig,
) -> Result<Vec<T>> {
    config.validate()?;
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = T::zero();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i]));
            sum += train_step(expert, vocab, &batch, config)?;
            steps += 1;
        }
        epoch_losses.push(sum / T::from_usize(steps).unwrap());
    }
    Ok(epoch_losses)
}

/// Per-token argmax (lowest index on ties), then BIO repair.
pub fn predict<T: Scalar>(expert: &ExpertParams<T>, doc: &Document, vocab: &Vocabulary) -> TagSequence {
    let dists = expert.forward_ids(&vocab.encode(doc));
    decode(&dists)
}

pub(crate) fn decode<T: Scalar>(dists: &[LabelDistribution<T>]) -> TagSequence {
    repair_tags(&TagSequence::new(dists.iter().map(LabelDistribution::argmax).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (LabelSet, Vec<Document>, Vec<TagSequence>, Vocabulary) {
        let labels = LabelSet::new(["PER", "LOC"]).unwrap();
        let docs = vec![
            Document::new("a", vec!["John", "lives", "in", "Paris"]).unwrap(),
            Document::new("b", vec!["Mary", "Smith", "visited", "Rome"]).unwrap(),
        ];
        let tags = vec![
            TagSequence::from_names(&["B-PER", "O", "O", "B-LOC"], &labels).unwrap(),
            TagSequence::from_names(&["B-PER", "I-PER", "O", "B-LOC"], &labels).unwrap(),
        ];
        let vocab = Vocabulary::build(&docs);
        (labels, docs, tags, vocab)
    }

    fn dims() -> Dims {
        Dims {
            window: 1,
            emb_dim: 4,
            hidden_dim: 5,
        }
    }

    #[test]
    fn vocabulary_reserves_unk_and_pad() {
        let (_, docs, _, vocab) = setup();
        assert_eq!(vocab.id("<definitely-unseen>"), UNK);
        assert_eq!(vocab.id("JOHN"), vocab.id("john"));
        assert_eq!(vocab.len(), 2 + 8);
        assert_eq!(vocab.encode(&docs[0]).len(), 4);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let (labels, _, _, vocab) = setup();
        let a: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 7).unwrap();
        let b: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 7).unwrap();
        let c: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensors().iter().all(|t| t.iter().all(|x| x.abs() <= 0.1)));
        let bad = Dims { emb_dim: 0, ..dims() };
        assert!(init_expert::<f64>(&vocab, &labels, bad, 0).is_err());
    }

    #[test]
    fn forward_normalized_and_uniform_when_output_zeroed() {
        let (labels, docs, _, vocab) = setup();
        let mut e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 1).unwrap();
        for d in forward(&e, &docs[0], &vocab).unwrap() {
            let s: f64 = d.as_slice().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(d.as_slice().iter().all(|&p| p >= 0.0));
        }
        e.output_w.fill(0.0);
        e.output_b.fill(0.0);
        for d in forward(&e, &docs[0], &vocab).unwrap() {
            for &p in d.as_slice() {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
        // uniform distributions: n * ln(tag_count); argmax tie-break gives O
        let n = nll(&e, &docs[0], &TagSequence::outside(4), &vocab).unwrap();
        assert!((n - 4.0 * 5f64.ln()).abs() < 1e-12);
        assert_eq!(predict(&e, &docs[0], &vocab), TagSequence::outside(4));

        e.hidden_b[0] = f64::NAN;
        assert!(matches!(forward(&e, &docs[0], &vocab), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_token_context_is_padded() {
        let (labels, _, _, vocab) = setup();
        let e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 3).unwrap();
        let ids = vec![vocab.id("paris")];
        assert_eq!(e.context(&ids, 0), vec![PAD, vocab.id("paris"), PAD]);
    }

    #[test]
    fn nll_matches_forward_recomputation() {
        let (labels, docs, tags, vocab) = setup();
        let e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 5).unwrap();
        for (d, t) in docs.iter().zip(&tags) {
            let dists = forward(&e, d, &vocab).unwrap();
            let oracle: f64 = dists
                .iter()
                .zip(t.iter())
                .map(|(p, &y)| -(p.as_slice()[y].max(1e-12)).ln())
                .sum();
            assert!((nll(&e, d, t, &vocab).unwrap() - oracle).abs() < 1e-9);
        }
        assert!(matches!(
            nll(&e, &docs[0], &TagSequence::outside(3), &vocab),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (labels, docs, tags, vocab) = setup();
        let mut e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 5).unwrap();
        let before = e.clone();
        let batch = [Example {
            doc: &docs[0],
            targets: Targets::Hard(&tags[0]),
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let loss = train_step(&mut e, &vocab, &batch, &cfg).unwrap();
        assert!(loss > 0.0);
        assert_eq!(e, before);
    }

    #[test]
    fn loss_decreases_and_memorizes() {
        let (labels, docs, tags, vocab) = setup();
        let mut e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 11).unwrap();
        let batch: Vec<_> = docs
            .iter()
            .zip(&tags)
            .map(|(doc, t)| Example {
                doc,
                targets: Targets::Hard(t),
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let loss = train_step(&mut e, &vocab, &batch, &cfg).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        let cfg = TrainConfig {
            learning_rate: 0.5,
            ..cfg
        };
        for _ in 0..2000 {
            train_step(&mut e, &vocab, &batch, &cfg).unwrap();
        }
        for (d, t) in docs.iter().zip(&tags) {
            assert_eq!(&predict(&e, d, &vocab), t);
        }
    }

    #[test]
    fn masked_tokens_do_not_contribute() {
        let (labels, docs, tags, vocab) = setup();
        let e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 2).unwrap();
        let mask = vec![true; 4];
        let batch = [Example {
            doc: &docs[0],
            targets: Targets::Masked(&tags[0], &mask),
        }];
        let out = loss_and_grad(&e, &vocab, &batch, 0.0).unwrap();
        assert_eq!(out.tokens, 0);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn one_hot_soft_targets_match_hard_bitwise() {
        let (labels, docs, tags, vocab) = setup();
        let e: ExpertParams<f64> = init_expert(&vocab, &labels, dims(), 4).unwrap();
        let soft: Vec<LabelDistribution<f64>> = tags[1]
            .iter()
            .map(|&t| LabelDistribution::one_hot(t, labels.tag_count()))
            .collect();
        let cfg = TrainConfig::default();
        let mut a = e.clone();
        let mut b = e;
        let la = train_step(
            &mut a,
            &vocab,
            &[Example {
                doc: &docs[1],
                targets: Targets::Hard(&tags[1]),
            }],
            &cfg,
        )
        .unwrap();
        let lb = train_step(
            &mut b,
            &vocab,
            &[Example {
                doc: &docs[1],
                targets: Targets::Soft(&soft),
            }],
            &cfg,
        )
        .unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn f32_expert_trains() {
        let (labels, docs, tags, vocab) = setup();
        let mut e: ExpertParams<f32> = init_expert(&vocab, &labels, dims(), 11).unwrap();
        let batch = [Example {
            doc: &docs[0],
            targets: Targets::Hard(&tags[0]),
        }];
        let first = train_step(&mut e, &vocab, &batch, &TrainConfig::default()).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&mut e, &vocab, &batch, &TrainConfig::default()).unwrap();
        }
        assert!(last < first);
    }
}
