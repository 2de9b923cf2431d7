// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-row image relevance and sink likelihood, and the selection of
//! image-centric `(head, source)` rows that receive reallocated attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sink::SinkPartition;
use crate::tensor::{mass_of, AttentionTensor, TokenContext};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Image relevance (`delta`) and sink likelihood (`xi`) for every row,
/// both stored `[head][source]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores {
    heads: usize,
    seq_len: usize,
    delta: Vec<f64>,
    xi: Vec<f64>,
    epsilon: f64,
}

impl HeadScores {
    /// Builds scores from raw matrices; used by tests and the browser demo.
    pub fn from_raw(heads: usize, seq_len: usize, delta: Vec<f64>, xi: Vec<f64>, epsilon: f64) -> Result<Self> {
        if delta.len() != heads * seq_len || xi.len() != heads * seq_len {
            return Err(Error::ShapeMismatch(format!(
                "delta/xi must have {} entries",
                heads * seq_len
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            heads,
            seq_len,
            delta,
            xi,
            epsilon,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn delta(&self, head: usize, source: usize) -> f64 {
        self.delta[head * self.seq_len + source]
    }

    pub fn xi(&self, head: usize, source: usize) -> f64 {
        self.xi[head * self.seq_len + source]
    }

    pub fn delta_matrix(&self) -> &[f64] {
        &self.delta
    }

    pub fn xi_matrix(&self) -> &[f64] {
        &self.xi
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

pub fn score_heads(
    t: &AttentionTensor,
    ctx: &TokenContext,
    sinks: &SinkPartition,
    epsilon: f64,
) -> Result<HeadScores> {
    if t.seq_len() != ctx.seq_len() {
        return Err(Error::DimensionMismatch(format!(
            "attention has S = {}, context has S = {}",
            t.seq_len(),
            ctx.seq_len()
        )));
    }
    if let Some(max) = sinks.all().max() {
        if max >= t.seq_len() {
            return Err(Error::DimensionMismatch(format!(
                "sink index {max} outside sequence of length {}",
                t.seq_len()
            )));
        }
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let span = ctx.image_span();
    let visual = sinks.visual().as_slice();
    let (heads, seq_len) = (t.heads(), t.seq_len());
    let mut delta = Vec::with_capacity(heads * seq_len);
    let mut xi = Vec::with_capacity(heads * seq_len);
    for h in 0..heads {
        for s in 0..seq_len {
            let row = t.row(h, s);
            let d: f64 = row[span.clone()].iter().sum();
            let v = mass_of(row, visual);
            delta.push(d);
            xi.push(v / (d + epsilon));
        }
    }
    Ok(HeadScores {
        heads,
        seq_len,
        delta,
        xi,
        epsilon,
    })
}

/// Direction of a threshold comparison. Both directions are non-strict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    AtLeast,
    AtMost,
}

impl Comparison {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Self::AtLeast => value >= threshold,
            Self::AtMost => value <= threshold,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Self::AtLeast => Self::AtMost,
            Self::AtMost => Self::AtLeast,
        }
    }
}

/// Which way each of the two thresholds cuts.
///
/// The default keeps rows that look mostly at the image (`delta >= rho`) and
/// spend little of that on visual sinks (`xi <= alpha`). [`Directions::literal`]
/// flips both comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Directions {
    pub relevance: Comparison,
    pub sink_likelihood: Comparison,
}

impl Directions {
    pub const fn image_focused() -> Self {
        Self {
            relevance: Comparison::AtLeast,
            sink_likelihood: Comparison::AtMost,
        }
    }

    pub const fn literal() -> Self {
        Self {
            relevance: Comparison::AtMost,
            sink_likelihood: Comparison::AtLeast,
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.relevance, self.sink_likelihood) {
            (Comparison::AtLeast, Comparison::AtMost) => "image-focused",
            (Comparison::AtMost, Comparison::AtLeast) => "literal",
            _ => "mixed",
        }
    }
}

impl Default for Directions {
    fn default() -> Self {
        Self::image_focused()
    }
}

/// Selected rows, head-major then source order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    pairs: Vec<(usize, usize)>,
    rho: f64,
    alpha: f64,
    directions: Directions,
}

impl HeadSelection {
    /// Every row of an `heads x seq_len` tensor (head selection disabled).
    pub fn all(heads: usize, seq_len: usize) -> Self {
        let pairs = (0..heads)
            .flat_map(|h| (0..seq_len).map(move |s| (h, s)))
            .collect();
        Self {
            pairs,
            rho: f64::NAN,
            alpha: f64::NAN,
            directions: Directions::default(),
        }
    }

    /// An explicit list of rows. Sorted and deduplicated.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self {
            pairs,
            rho: f64::NAN,
            alpha: f64::NAN,
            directions: Directions::default(),
        }
    }

    pub fn empty() -> Self {
        Self::from_pairs([])
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, head: usize, source: usize) -> bool {
        self.pairs.binary_search(&(head, source)).is_ok()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn directions(&self) -> Directions {
        self.directions
    }
}

pub fn select_visual_heads(scores: &HeadScores, rho: f64, alpha: f64, directions: Directions) -> HeadSelection {
    let mut pairs = Vec::new();
    for h in 0..scores.heads {
        for s in 0..scores.seq_len {
            if directions.relevance.holds(scores.delta(h, s), rho)
                && directions.sink_likelihood.holds(scores.xi(h, s), alpha)
            {
                pairs.push((h, s));
            }
        }
    }
    HeadSelection {
        pairs,
        rho,
        alpha,
        directions,
    }
}
