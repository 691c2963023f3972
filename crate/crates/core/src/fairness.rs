//! Two-sided fair document-to-expert assignment by Sinkhorn matrix scaling.
//!
//! The score matrix `S` (documents x experts) is rescaled as
//! `diag(a) S diag(b)` so that every row sums to `1/|D|` and every column to
//! `1/|M|`. The alternating updates are
//!
//! ```text
//! a = 1 / (|D| * S b)
//! b = 1 / (|M| * S^T a)
//! ```
//!
//! starting from `b = 1`. Documents are then routed by the argmax of their
//! scaled row.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::moe::{Assignment, LogScoreMatrix};
use crate::scalar::Scalar;
use crate::tagger::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct FairConfig {
    /// Lower clamp applied to exponentiated scores.
    pub epsilon_floor: f64,
    /// Maximum absolute marginal deviation accepted as converged.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for FairConfig {
    fn default() -> Self {
        Self {
            epsilon_floor: 1e-9,
            tolerance: 1e-6,
            max_iters: 1000,
        }
    }
}

impl FairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_floor.is_nan()
            || self.epsilon_floor <= 0.0
            || !(self.tolerance > 0.0 && self.tolerance < 1.0)
            || self.max_iters == 0
        {
            return Err(Error::InvalidConfig(
                "fair config needs epsilon_floor > 0, 0 < tolerance < 1, max_iters >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Strictly positive documents x experts matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    values: Array2<T>,
    doc_ids: Vec<String>,
}

impl<T: Scalar> ScoreMatrix<T> {
    /// Wraps `values`, which must be finite and strictly positive.
    pub fn new(values: Array2<T>) -> Result<Self> {
        let doc_ids = (0..values.nrows()).map(|i| format!("doc{i}")).collect();
        Self::with_ids(values, doc_ids)
    }

    pub fn with_ids(values: Array2<T>, doc_ids: Vec<String>) -> Result<Self> {
        if doc_ids.len() != values.nrows() {
            return Err(Error::LengthMismatch {
                expected: values.nrows(),
                found: doc_ids.len(),
            });
        }
        if values.is_empty() {
            return Err(Error::Shape("score matrix is empty".into()));
        }
        if values.iter().any(|x| !(x.is_finite() && *x > T::zero())) {
            return Err(Error::Contract("score matrix entries must be finite and > 0".into()));
        }
        Ok(Self { values, doc_ids })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row_sums(&self) -> Array1<T> {
        self.values.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<T> {
        self.values.sum_axis(Axis(0))
    }

    /// Largest absolute deviation of any row sum from `1/|D|` or column sum from `1/|M|`.
    pub fn marginal_deviation(&self) -> T {
        let (rows, cols) = self.values.dim();
        let row_target = T::one() / T::from_usize(rows).unwrap();
        let col_target = T::one() / T::from_usize(cols).unwrap();
        let r = self
            .row_sums()
            .iter()
            .map(|&s| (s - row_target).abs())
            .fold(T::zero(), T::max);
        let c = self
            .col_sums()
            .iter()
            .map(|&s| (s - col_target).abs())
            .fold(T::zero(), T::max);
        r.max(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVectors<T> {
    /// Row (document) scaling.
    pub a: Array1<T>,
    /// Column (expert) scaling.
    pub b: Array1<T>,
    pub iterations: usize,
    pub converged: bool,
    pub deviation: T,
}

/// Row-wise `exp(x - max)`, clamped below at `epsilon_floor`.
pub fn to_scores<T: Scalar>(log_scores: &LogScoreMatrix<T>, config: &FairConfig) -> ScoreMatrix<T> {
    let floor = T::lit(config.epsilon_floor);
    let mut values = log_scores.values.clone();
    for mut row in values.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp().max(floor));
    }
    ScoreMatrix {
        values,
        doc_ids: log_scores.doc_ids.clone(),
    }
}

/// `diag(a) S diag(b)`.
pub fn apply_scaling<T: Scalar>(s: &ScoreMatrix<T>, a: &Array1<T>, b: &Array1<T>) -> ScoreMatrix<T> {
    let mut values = s.values.clone();
    for ((d, m), x) in values.indexed_iter_mut() {
        *x = a[d] * *x * b[m];
    }
    ScoreMatrix {
        values,
        doc_ids: s.doc_ids.clone(),
    }
}

/// Alternating Sinkhorn updates until every marginal is within `tolerance`
/// or `max_iters` is reached (then `converged` is false).
pub fn sinkhorn<T: Scalar>(s: &ScoreMatrix<T>, config: &FairConfig) -> Result<(ScalingVectors<T>, ScoreMatrix<T>)> {
    config.validate()?;
    if s.values.iter().any(|x| x.is_nan() || *x <= T::zero()) {
        return Err(Error::Contract("sinkhorn needs a strictly positive matrix".into()));
    }
    let (rows, cols) = s.values.dim();
    let n_docs = T::from_usize(rows).unwrap();
    let n_experts = T::from_usize(cols).unwrap();
    let tol = T::lit(config.tolerance);

    let mut a = Array1::from_elem(rows, T::one());
    let mut b = Array1::from_elem(cols, T::one());
    let mut iterations = 0;
    let mut deviation = T::infinity();
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        a = s.values.dot(&b).mapv(|x| T::one() / (n_docs * x));
        b = s.values.t().dot(&a).mapv(|x| T::one() / (n_experts * x));
        deviation = apply_scaling(s, &a, &b).marginal_deviation();
        if deviation < tol {
            converged = true;
            break;
        }
    }
    let scaled = apply_scaling(s, &a, &b);
    Ok((
        ScalingVectors {
            a,
            b,
            iterations,
            converged,
            deviation,
        },
        scaled,
    ))
}

/// Per-row argmax of the scaled matrix, lowest expert index on ties.
pub fn fair_assign<T: Scalar>(scaled: &ScoreMatrix<T>) -> Assignment {
    let experts = scaled
        .values
        .rows()
        .into_iter()
        .map(|row| argmax(&row.to_vec()))
        .collect();
    Assignment::new(scaled.doc_ids.clone(), experts, scaled.values.ncols()).expect("argmax within range")
}

/// TSV diagnostic dump of the scaling vectors and the scaled matrix.
pub fn format_fair_dump<T: Scalar>(vectors: &ScalingVectors<T>, scaled: &ScoreMatrix<T>) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "#iterations\t{}\tconverged\t{}\tdeviation\t{}",
        vectors.iterations, vectors.converged, vectors.deviation
    )
    .unwrap();
    out.push_str("doc\ta");
    for m in 0..scaled.values.ncols() {
        write!(out, "\texpert{m}").unwrap();
    }
    out.push('\n');
    out.push_str("b\t");
    for x in &vectors.b {
        write!(out, "\t{x}").unwrap();
    }
    out.push('\n');
    for (d, row) in scaled.values.rows().into_iter().enumerate() {
        write!(out, "{}\t{}", scaled.doc_ids[d], vectors.a[d]).unwrap();
        for x in row {
            write!(out, "\t{x}").unwrap();
        }
        out.push('\n');
    }
    out
}
