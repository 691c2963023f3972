//! Entity-level exact-match precision, recall and F1.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::corpus::{tags_to_spans, Corpus, EntitySpan, Layer, TagSequence};
use crate::error::{Error, Result};
use crate::moe::{predict_corpus, ExpertPool};
use crate::scalar::Scalar;

/// Micro-averaged span counts and the ratios derived from them (0/0 is 0).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    pub fn merge(self, other: Metrics) -> Metrics {
        Metrics::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

impl fmt::Display for Metrics {
    /// `precision<TAB>recall<TAB>f1<TAB>tp<TAB>fp<TAB>fn`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

fn check_disjoint(spans: &[EntitySpan], which: &str) -> Result<()> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::OverlappingSpans(format!(
                "{which} spans [{}, {}) and [{}, {})",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    Ok(())
}

/// Exact (start, end, type) matching between two internally disjoint span lists.
pub fn span_prf(gold: &[EntitySpan], pred: &[EntitySpan]) -> Result<Metrics> {
    check_disjoint(gold, "gold")?;
    check_disjoint(pred, "predicted")?;
    let gold_set: HashSet<&EntitySpan> = gold.iter().collect();
    let tp = pred.iter().filter(|s| gold_set.contains(s)).count();
    Ok(Metrics::from_counts(tp, pred.len() - tp, gold.len() - tp))
}

/// Overall metrics plus one entry per entity type (in label-set order).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_type: Vec<(String, Metrics)>,
}

/// Scores predicted tag sequences against reference sequences for the same documents.
pub fn evaluate_tags(corpus: &Corpus, reference: &[TagSequence], predicted: &[TagSequence]) -> Result<EvalReport> {
    if reference.len() != predicted.len() || reference.len() != corpus.len() {
        return Err(Error::LengthMismatch {
            expected: corpus.len(),
            found: predicted.len(),
        });
    }
    let labels = corpus.label_set();
    let mut overall = Metrics::default();
    let mut per_type: BTreeMap<usize, Metrics> = (0..labels.num_types()).map(|t| (t, Metrics::default())).collect();
    for (gold_tags, pred_tags) in reference.iter().zip(predicted) {
        let gold = tags_to_spans(gold_tags, labels);
        let pred = tags_to_spans(pred_tags, labels);
        overall = overall.merge(span_prf(&gold, &pred)?);
        for (t, m) in per_type.iter_mut() {
            let name = labels.type_name(*t);
            let g: Vec<EntitySpan> = gold.iter().filter(|s| s.entity_type == name).cloned().collect();
            let p: Vec<EntitySpan> = pred.iter().filter(|s| s.entity_type == name).cloned().collect();
            *m = m.merge(span_prf(&g, &p)?);
        }
    }
    Ok(EvalReport {
        overall,
        per_type: per_type
            .into_iter()
            .map(|(t, m)| (labels.type_name(t).to_string(), m))
            .collect(),
    })
}

/// Predicts every document (ensemble mean, or expert 0 alone) and scores it against `reference`.
pub fn evaluate<T: Scalar>(
    pool: &ExpertPool<T>,
    corpus: &Corpus,
    reference: Layer,
    use_ensemble: bool,
) -> Result<Metrics> {
    evaluate_report(pool, corpus, reference, use_ensemble).map(|r| r.overall)
}

pub fn evaluate_report<T: Scalar>(
    pool: &ExpertPool<T>,
    corpus: &Corpus,
    reference: Layer,
    use_ensemble: bool,
) -> Result<EvalReport> {
    let gold = corpus.layer(reference)?;
    if corpus.label_set() != pool.labels() {
        return Err(Error::Shape("corpus label set differs from the model's".into()));
    }
    let predicted = predict_corpus(pool, corpus, use_ensemble);
    let report = evaluate_tags(corpus, gold, &predicted)?;
    if !report.overall.f1.is_finite() {
        return Err(Error::NonFinite("evaluation metric"));
    }
    Ok(report)
}
