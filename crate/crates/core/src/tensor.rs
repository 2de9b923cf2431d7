// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention tensors, token contexts and index sets.
//!
//! Everything here is immutable once built. Interventions produce new
//! tensors rather than editing existing ones, so a tensor can be shared
//! across worker threads freely.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for freshly softmaxed attention.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-5;

/// Multi-head attention weights of one layer, laid out `[head][source][target]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layer_index: usize,
    heads: usize,
    seq_len: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    /// Builds a validated tensor from a flat `[H * S * S]` buffer.
    pub fn new(heads: usize, seq_len: usize, weights: Vec<f64>, layer_index: usize) -> Result<Self> {
        Self::with_tolerance(heads, seq_len, weights, layer_index, STOCHASTIC_TOLERANCE)
    }

    /// Same as [`AttentionTensor::new`] with a caller-chosen row-sum tolerance.
    pub fn with_tolerance(
        heads: usize,
        seq_len: usize,
        weights: Vec<f64>,
        layer_index: usize,
        tolerance: f64,
    ) -> Result<Self> {
        if heads == 0 || seq_len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention tensor needs H >= 1 and S >= 1, got H = {heads}, S = {seq_len}"
            )));
        }
        let expected = heads * seq_len * seq_len;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} weights for {heads}x{seq_len}x{seq_len}, got {}",
                weights.len()
            )));
        }
        for (r, row) in weights.chunks_exact(seq_len).enumerate() {
            let (head, src) = (r / seq_len, r % seq_len);
            let mut sum = 0.0;
            for (col, &w) in row.iter().enumerate() {
                if !w.is_finite() {
                    return Err(Error::NonFiniteValue("attention weights"));
                }
                if w < 0.0 {
                    return Err(Error::NegativeWeight {
                        head,
                        row: src,
                        col,
                        value: w,
                    });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::NonStochasticRow {
                    head,
                    row: src,
                    sum,
                    tolerance,
                });
            }
        }
        Ok(Self {
            layer_index,
            heads,
            seq_len,
            weights,
        })
    }

    /// Nested-vector convenience constructor, `weights[h][s][j]`.
    pub fn from_nested(weights: &[Vec<Vec<f64>>], layer_index: usize) -> Result<Self> {
        let heads = weights.len();
        let seq_len = weights.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(heads * seq_len * seq_len);
        for head in weights {
            if head.len() != seq_len {
                return Err(Error::ShapeMismatch("ragged head dimension".into()));
            }
            for row in head {
                if row.len() != seq_len {
                    return Err(Error::ShapeMismatch("ragged row dimension".into()));
                }
                flat.extend_from_slice(row);
            }
        }
        Self::new(heads, seq_len, flat, layer_index)
    }

    /// Wraps an intervention output. Rows may sum below one here.
    pub(crate) fn from_parts_unchecked(
        heads: usize,
        seq_len: usize,
        weights: Vec<f64>,
        layer_index: usize,
    ) -> Self {
        debug_assert_eq!(weights.len(), heads * seq_len * seq_len);
        Self {
            layer_index,
            heads,
            seq_len,
            weights,
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, head: usize, source: usize, target: usize) -> f64 {
        self.weights[self.offset(head, source) + target]
    }

    /// The attention distribution of `source` in `head`.
    pub fn row(&self, head: usize, source: usize) -> &[f64] {
        let start = self.offset(head, source);
        &self.weights[start..start + self.seq_len]
    }

    pub(crate) fn offset(&self, head: usize, source: usize) -> usize {
        (head * self.seq_len + source) * self.seq_len
    }

    /// Sum of `weights[head, source, j]` over `columns`, in ascending column order.
    pub fn row_mass(&self, head: usize, source: usize, columns: &IndexSet) -> Result<f64> {
        if head >= self.heads {
            return Err(Error::IndexOutOfRange {
                what: "heads",
                index: head,
                len: self.heads,
            });
        }
        if source >= self.seq_len {
            return Err(Error::IndexOutOfRange {
                what: "sequence",
                index: source,
                len: self.seq_len,
            });
        }
        if let Some(&max) = columns.as_slice().last() {
            if max >= self.seq_len {
                return Err(Error::IndexOutOfRange {
                    what: "sequence",
                    index: max,
                    len: self.seq_len,
                });
            }
        }
        Ok(mass_of(self.row(head, source), columns.as_slice()))
    }

    /// Sum of a contiguous column range of one row.
    pub fn span_mass(&self, head: usize, source: usize, span: Range<usize>) -> f64 {
        self.row(head, source)[span].iter().sum()
    }
}

/// Ascending-order sum over the given columns of a row.
pub(crate) fn mass_of(row: &[f64], columns: &[usize]) -> f64 {
    columns.iter().map(|&j| row[j]).sum()
}

/// Strictly increasing set of token positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Builds a set from arbitrary indices, sorting and dropping duplicates.
    pub fn from_unsorted(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    /// Builds a set from indices that must already be strictly increasing.
    pub fn from_sorted(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidContext(
                "index set must be strictly increasing".into(),
            ));
        }
        Ok(Self(indices))
    }

    pub fn range(range: Range<usize>) -> Self {
        Self(range.collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.0.iter().all(|&i| other.contains(i))
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl TryFrom<Vec<usize>> for IndexSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::from_sorted(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::from_unsorted(iter)
    }
}

/// What a token position holds in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    System,
    Image,
    Question,
    Option,
    Gaslight,
    Answer,
}

impl TokenRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::Image => "image",
            Self::Question => "question",
            Self::Option => "option",
            Self::Gaslight => "gaslight",
            Self::Answer => "answer",
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "system" => Self::System,
            "image" => Self::Image,
            "question" => Self::Question,
            "option" => Self::Option,
            "gaslight" => Self::Gaslight,
            "answer" => Self::Answer,
            other => {
                return Err(Error::InvalidContext(format!("unknown token role {other:?}")))
            }
        })
    }
}

/// Hidden states of one sequence plus where the image tokens sit.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenContext {
    hidden: usize,
    embeddings: Vec<f64>,
    image_span: Range<usize>,
    roles: Vec<TokenRole>,
}

impl TokenContext {
    /// `embeddings` is a flat `[S * d]` buffer, `S = roles.len()`.
    pub fn new(
        embeddings: Vec<f64>,
        hidden: usize,
        image_span: Range<usize>,
        roles: Vec<TokenRole>,
    ) -> Result<Self> {
        let seq_len = roles.len();
        if hidden == 0 {
            return Err(Error::InvalidContext("hidden dimension must be positive".into()));
        }
        if embeddings.len() != seq_len * hidden {
            return Err(Error::ShapeMismatch(format!(
                "expected {} embedding values for S = {seq_len}, d = {hidden}, got {}",
                seq_len * hidden,
                embeddings.len()
            )));
        }
        if !(image_span.start < image_span.end && image_span.end <= seq_len) {
            return Err(Error::InvalidContext(format!(
                "image span {image_span:?} must be non-empty and within 0..{seq_len}"
            )));
        }
        for (i, role) in roles.iter().enumerate() {
            let in_span = image_span.contains(&i);
            if in_span != (*role == TokenRole::Image) {
                return Err(Error::InvalidContext(format!(
                    "token {i} has role {role} but {} the image span",
                    if in_span { "lies inside" } else { "lies outside" }
                )));
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("embeddings"));
        }
        Ok(Self {
            hidden,
            embeddings,
            image_span,
            roles,
        })
    }

    /// Same span and roles, different hidden states (e.g. a deeper layer).
    pub fn with_embeddings(&self, embeddings: Vec<f64>) -> Result<Self> {
        if embeddings.len() != self.embeddings.len() {
            return Err(Error::ShapeMismatch(format!(
                "replacement embeddings have {} values, expected {}",
                embeddings.len(),
                self.embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("embeddings"));
        }
        Ok(Self {
            embeddings,
            ..self.clone()
        })
    }

    pub fn seq_len(&self) -> usize {
        self.roles.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.hidden..(token + 1) * self.hidden]
    }

    pub fn image_span(&self) -> Range<usize> {
        self.image_span.clone()
    }

    pub fn image_indices(&self) -> IndexSet {
        IndexSet::range(self.image_span.clone())
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn has_role(&self, role: TokenRole) -> bool {
        self.roles.contains(&role)
    }
}
