// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sink-token detection from hidden-state magnitudes.
//!
//! A token is a sink when its hidden state, scaled by `1/sqrt(d)`, carries a
//! magnitude above `tau`. By default only the monitored dimensions are
//! inspected and the largest absolute value among them is thresholded. The
//! alternative [`NormMode::FullNorm`] thresholds the whole-row l2 norm
//! instead and ignores the monitored set.
//!
//! Detected sinks are split by the image span into visual and text sinks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{IndexSet, TokenContext};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `max_{d' in D} |x_{i,d'}| / sqrt(d)`.
    #[default]
    MonitoredMax,
    /// `sqrt(sum_j x_{i,j}^2) / sqrt(d)`.
    FullNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkCriterion {
    monitored_dims: Vec<usize>,
    tau: f64,
    hidden: usize,
    mode: NormMode,
}

impl SinkCriterion {
    pub fn new(monitored_dims: Vec<usize>, tau: f64, hidden: usize, mode: NormMode) -> Result<Self> {
        if monitored_dims.is_empty() {
            return Err(Error::InvalidCriterion("monitored dimensions must be non-empty".into()));
        }
        if let Some(&dim) = monitored_dims.iter().find(|&&d| d >= hidden) {
            return Err(Error::DimensionOutOfRange { dim, hidden });
        }
        // +inf is allowed: it disables detection.
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidCriterion(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            monitored_dims,
            tau,
            hidden,
            mode,
        })
    }

    pub fn monitored_dims(&self) -> &[usize] {
        &self.monitored_dims
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    fn check_context(&self, ctx: &TokenContext) -> Result<()> {
        if ctx.hidden() != self.hidden {
            return Err(Error::DimensionMismatch(format!(
                "criterion built for d = {}, context has d = {}",
                self.hidden,
                ctx.hidden()
            )));
        }
        Ok(())
    }
}

/// Detected sinks split by the image span.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SinkPartition {
    all: IndexSet,
    visual: IndexSet,
    text: IndexSet,
}

impl SinkPartition {
    /// No sinks at all.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Splits `all` into visual (inside `ctx`'s image span) and text sinks.
    pub fn split(all: IndexSet, ctx: &TokenContext) -> Result<Self> {
        if let Some(max) = all.max() {
            if max >= ctx.seq_len() {
                return Err(Error::IndexOutOfRange {
                    what: "sequence",
                    index: max,
                    len: ctx.seq_len(),
                });
            }
        }
        let span = ctx.image_span();
        let visual: IndexSet = all.iter().filter(|i| span.contains(i)).collect();
        let text: IndexSet = all.iter().filter(|i| !span.contains(i)).collect();
        Ok(Self { all, visual, text })
    }

    /// Builds a partition directly from the two halves. They must be
    /// disjoint and `visual` must sit inside the image span of `ctx`.
    pub fn from_parts(visual: IndexSet, text: IndexSet, ctx: &TokenContext) -> Result<Self> {
        let span = ctx.image_span();
        if visual.iter().any(|i| !span.contains(&i)) {
            return Err(Error::InvalidContext("visual sink outside the image span".into()));
        }
        if text.iter().any(|i| span.contains(&i)) {
            return Err(Error::InvalidContext("text sink inside the image span".into()));
        }
        let all = IndexSet::from_unsorted(visual.iter().chain(text.iter()));
        Self::split(all, ctx)
    }

    pub fn all(&self) -> &IndexSet {
        &self.all
    }

    pub fn visual(&self) -> &IndexSet {
        &self.visual
    }

    pub fn text(&self) -> &IndexSet {
        &self.text
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    /// Copy with the text half replaced (used by the token-selection ablation).
    pub(crate) fn with_text(&self, text: IndexSet) -> Self {
        let all = IndexSet::from_unsorted(self.visual.iter().chain(text.iter()));
        Self {
            all,
            visual: self.visual.clone(),
            text,
        }
    }

    pub(crate) fn without_text(&self) -> Self {
        self.with_text(IndexSet::new())
    }

    pub(crate) fn without_visual(&self) -> Self {
        Self {
            all: self.text.clone(),
            visual: IndexSet::new(),
            text: self.text.clone(),
        }
    }
}

/// Thresholded magnitude of one token under `criterion`.
pub fn token_norm_score(ctx: &TokenContext, token: usize, criterion: &SinkCriterion) -> Result<f64> {
    criterion.check_context(ctx)?;
    if token >= ctx.seq_len() {
        return Err(Error::IndexOutOfRange {
            what: "sequence",
            index: token,
            len: ctx.seq_len(),
        });
    }
    Ok(score_unchecked(ctx.embedding(token), criterion))
}

fn score_unchecked(row: &[f64], criterion: &SinkCriterion) -> f64 {
    let scale = (criterion.hidden as f64).sqrt();
    match criterion.mode {
        NormMode::MonitoredMax => criterion
            .monitored_dims
            .iter()
            .map(|&d| row[d].abs() / scale)
            .fold(0.0, f64::max),
        NormMode::FullNorm => row.iter().map(|v| v * v).sum::<f64>().sqrt() / scale,
    }
}

/// Scores for every token, in sequence order.
pub fn token_scores(ctx: &TokenContext, criterion: &SinkCriterion) -> Result<Vec<f64>> {
    criterion.check_context(ctx)?;
    Ok((0..ctx.seq_len())
        .map(|i| score_unchecked(ctx.embedding(i), criterion))
        .collect())
}

/// Tokens scoring strictly above tau, split by the image span.
pub fn detect_sinks(ctx: &TokenContext, criterion: &SinkCriterion) -> Result<SinkPartition> {
    let scores = token_scores(ctx, criterion)?;
    let all: IndexSet = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > criterion.tau)
        .map(|(i, _)| i)
        .collect();
    SinkPartition::split(all, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TokenRole;
    use proptest::prelude::*;

    fn ctx_with(seq_len: usize, hidden: usize, image: std::ops::Range<usize>, emb: Vec<f64>) -> TokenContext {
        let roles = (0..seq_len)
            .map(|i| if image.contains(&i) { TokenRole::Image } else { TokenRole::Question })
            .collect();
        TokenContext::new(emb, hidden, image, roles).unwrap()
    }

    // Direct evaluation of the thresholded quantity, kept separate from the
    // implementation's fold.
    fn oracle_score(row: &[f64], dims: &[usize], hidden: usize) -> f64 {
        let mut best = 0.0f64;
        for &d in dims {
            let v = row[d].abs() / (hidden as f64).sqrt();
            if v > best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn zero_row_scores_zero() {
        let ctx = ctx_with(2, 4, 0..1, vec![0.0; 8]);
        let c = SinkCriterion::new(vec![1, 3], 20.0, 4, NormMode::MonitoredMax).unwrap();
        assert_eq!(token_norm_score(&ctx, 1, &c).unwrap(), 0.0);
        assert!(detect_sinks(&ctx, &c).unwrap().is_empty());
    }

    #[test]
    fn one_hot_spike_scales_by_root_d() {
        let d = 256;
        let mut emb = vec![0.0; 2 * d];
        emb[d + 17] = 320.0;
        let ctx = ctx_with(2, d, 0..1, emb);
        let c = SinkCriterion::new(vec![17, 200], 20.0, d, NormMode::MonitoredMax).unwrap();
        let s = token_norm_score(&ctx, 1, &c).unwrap();
        assert_eq!(s, 20.0);
        assert_eq!(s, oracle_score(ctx.embedding(1), &[17, 200], d));
        // exactly tau is not a sink
        assert!(detect_sinks(&ctx, &c).unwrap().is_empty());
    }

    #[test]
    fn planted_spikes_split_by_image_span() {
        let (s, d) = (48, 64);
        let mut emb = vec![0.5; s * d];
        emb[3 * d + 7] = 40.0 * 8.0;
        emb[41 * d + 9] = -30.0 * 8.0;
        let ctx = ctx_with(s, d, 2..38, emb);
        let c = SinkCriterion::new(vec![7, 9], 20.0, d, NormMode::MonitoredMax).unwrap();
        let p = detect_sinks(&ctx, &c).unwrap();
        assert_eq!(p.visual().as_slice(), &[3]);
        assert_eq!(p.text().as_slice(), &[41]);
        assert_eq!(p.all().as_slice(), &[3, 41]);
        for i in 0..s {
            let expect = oracle_score(ctx.embedding(i), &[7, 9], d) > 20.0;
            assert_eq!(p.all().contains(i), expect);
        }
    }

    #[test]
    fn infinite_tau_finds_nothing() {
        let d = 16;
        let emb = vec![1e6; 3 * d];
        let ctx = ctx_with(3, d, 0..2, emb);
        let c = SinkCriterion::new(vec![0], f64::INFINITY, d, NormMode::MonitoredMax).unwrap();
        assert!(detect_sinks(&ctx, &c).unwrap().is_empty());
    }

    #[test]
    fn full_norm_mode_uses_whole_row() {
        let d = 4;
        let ctx = ctx_with(2, d, 0..1, vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0]);
        let c = SinkCriterion::new(vec![0], 1.5, d, NormMode::FullNorm).unwrap();
        assert_eq!(token_norm_score(&ctx, 1, &c).unwrap(), 2.0);
        assert_eq!(detect_sinks(&ctx, &c).unwrap().text().as_slice(), &[1]);
    }

    #[test]
    fn criterion_validation() {
        assert!(matches!(
            SinkCriterion::new(vec![], 1.0, 4, NormMode::MonitoredMax),
            Err(Error::InvalidCriterion(_))
        ));
        assert!(matches!(
            SinkCriterion::new(vec![4], 1.0, 4, NormMode::MonitoredMax),
            Err(Error::DimensionOutOfRange { dim: 4, hidden: 4 })
        ));
        assert!(SinkCriterion::new(vec![0], 0.0, 4, NormMode::MonitoredMax).is_err());
        assert!(SinkCriterion::new(vec![0], f64::NAN, 4, NormMode::MonitoredMax).is_err());
        let ctx = ctx_with(2, 4, 0..1, vec![0.0; 8]);
        let c = SinkCriterion::new(vec![0], 1.0, 8, NormMode::MonitoredMax).unwrap();
        assert!(matches!(token_norm_score(&ctx, 0, &c), Err(Error::DimensionMismatch(_))));
        let c = SinkCriterion::new(vec![0], 1.0, 4, NormMode::MonitoredMax).unwrap();
        assert!(matches!(token_norm_score(&ctx, 2, &c), Err(Error::IndexOutOfRange { .. })));
    }

    fn arb_context() -> impl Strategy<Value = (TokenContext, Vec<usize>)> {
        (2usize..24, 2usize..16).prop_flat_map(|(s, d)| {
            (
                Just(s),
                Just(d),
                0..s,
                proptest::collection::vec(-400.0f64..400.0, s * d),
                proptest::collection::vec(0..d, 1..4),
            )
                .prop_map(|(s, d, start, emb, dims)| {
                    let end = (start + 1 + s / 3).min(s);
                    (ctx_with(s, d, start..end, emb), dims)
                })
        })
    }

    proptest! {
        #[test]
        fn sinks_shrink_as_tau_grows(
            (ctx, dims) in arb_context(),
            t1 in 0.1f64..100.0,
            dt in 0.0f64..100.0,
        ) {
            let d = ctx.hidden();
            let lo = SinkCriterion::new(dims.clone(), t1, d, NormMode::MonitoredMax).unwrap();
            let hi = SinkCriterion::new(dims, t1 + dt, d, NormMode::MonitoredMax).unwrap();
            let a = detect_sinks(&ctx, &lo).unwrap();
            let b = detect_sinks(&ctx, &hi).unwrap();
            prop_assert!(b.all().is_subset(a.all()));
        }

        #[test]
        fn partition_is_disjoint_cover(
            (ctx, dims) in arb_context(),
            tau in 0.1f64..60.0,
        ) {
            let c = SinkCriterion::new(dims, tau, ctx.hidden(), NormMode::MonitoredMax).unwrap();
            let p = detect_sinks(&ctx, &c).unwrap();
            let span = ctx.image_span();
            prop_assert!(p.visual().iter().all(|i| span.contains(&i)));
            prop_assert!(p.text().iter().all(|i| !span.contains(&i)));
            prop_assert_eq!(p.visual().len() + p.text().len(), p.all().len());
            let union = IndexSet::from_unsorted(p.visual().iter().chain(p.text().iter()));
            prop_assert_eq!(&union, p.all());
        }

        #[test]
        fn unmonitored_dims_do_not_matter(
            (ctx, dims) in arb_context(),
            tau in 0.1f64..60.0,
            noise in proptest::collection::vec(-1e4f64..1e4, 24 * 16),
        ) {
            let d = ctx.hidden();
            let mut emb = ctx.embeddings().to_vec();
            for (i, v) in emb.iter_mut().enumerate() {
                if !dims.contains(&(i % d)) {
                    *v = noise[i % noise.len()];
                }
            }
            let other = ctx.with_embeddings(emb).unwrap();
            let c = SinkCriterion::new(dims, tau, d, NormMode::MonitoredMax).unwrap();
            prop_assert_eq!(detect_sinks(&ctx, &c).unwrap(), detect_sinks(&other, &c).unwrap());
        }
    }
}
