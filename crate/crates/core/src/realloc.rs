// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention reallocation from text sinks to the image span.
//!
//! For each selected `(head, source)` row:
//!
//! 1. text-sink entries are scaled by `p`;
//! 2. the removed `(1 - p)` share of their original mass becomes the budget;
//! 3. visual-sink entries are set to zero;
//! 4. the budget is spread over the image span in proportion to the row's
//!    remaining image profile.
//!
//! Visual-sink mass is dropped rather than redistributed, so a modified row
//! sums to `1 - zeroed` unless `renormalize_rows` is set. Rows outside the
//! selection are copied through untouched.

use serde::{Deserialize, Serialize};

use crate::config::{InterventionConfig, SourceToggles};
use crate::error::{Error, Result};
use crate::heads::{score_heads, select_visual_heads, HeadScores, HeadSelection};
use crate::sink::{detect_sinks, SinkCriterion, SinkPartition};
use crate::tensor::{AttentionTensor, IndexSet, TokenContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReallocParams {
    pub p: f64,
    pub sources: SourceToggles,
    pub renormalize_rows: bool,
}

impl Default for ReallocParams {
    fn default() -> Self {
        Self {
            p: 0.6,
            sources: SourceToggles::default(),
            renormalize_rows: false,
        }
    }
}

impl ReallocParams {
    pub fn validate(&self) -> Result<()> {
        // p = 1 is accepted as an explicit no-op on the text side.
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidP(self.p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Modified,
    /// Nothing left on the image span after zeroing visual sinks; the row
    /// was left as it was.
    ZeroImageMass,
}

/// Accounting for one selected row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub head: usize,
    pub source: usize,
    /// Attention harvested from text sinks.
    pub budget: f64,
    /// Image-span mass of the original row.
    pub original_image_mass: f64,
    /// Image-span mass once visual sinks are zeroed, before the budget lands.
    pub pre_image_mass: f64,
    /// Image-span mass of the written-back row.
    pub post_image_mass: f64,
    /// Visual-sink mass that was removed.
    pub zeroed_mass: f64,
    pub status: RowStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReallocReport {
    pub layer_index: usize,
    pub rows: Vec<RowReport>,
}

impl ReallocReport {
    pub fn modified_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RowStatus::Modified).count()
    }

    pub fn skipped_rows(&self) -> usize {
        self.rows.len() - self.modified_rows()
    }

    pub fn total_budget(&self) -> f64 {
        self.rows.iter().map(|r| r.budget).sum()
    }

    pub fn row(&self, head: usize, source: usize) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.head == head && r.source == source)
    }
}

fn check_shapes(t: &AttentionTensor, ctx: &TokenContext, sinks: &SinkPartition, sel: &HeadSelection) -> Result<()> {
    if t.seq_len() != ctx.seq_len() {
        return Err(Error::DimensionMismatch(format!(
            "attention has S = {}, context has S = {}",
            t.seq_len(),
            ctx.seq_len()
        )));
    }
    if let Some(max) = sinks.all().max() {
        if max >= t.seq_len() {
            return Err(Error::IndexOutOfRange {
                what: "sequence",
                index: max,
                len: t.seq_len(),
            });
        }
    }
    let span = ctx.image_span();
    if sinks.visual().iter().any(|i| !span.contains(&i)) || sinks.text().iter().any(|i| span.contains(&i)) {
        return Err(Error::InvalidContext(
            "sink partition does not match the context's image span".into(),
        ));
    }
    if let Some(&(h, s)) = sel.pairs().iter().find(|&&(h, s)| h >= t.heads() || s >= t.seq_len()) {
        return Err(Error::IndexOutOfRange {
            what: if h >= t.heads() { "heads" } else { "sequence" },
            index: if h >= t.heads() { h } else { s },
            len: if h >= t.heads() { t.heads() } else { t.seq_len() },
        });
    }
    Ok(())
}

/// Reallocates attention on the selected rows of one layer.
pub fn reallocate(
    t: &AttentionTensor,
    ctx: &TokenContext,
    sinks: &SinkPartition,
    sel: &HeadSelection,
    params: &ReallocParams,
) -> Result<(AttentionTensor, ReallocReport)> {
    params.validate()?;
    check_shapes(t, ctx, sinks, sel)?;

    let empty = IndexSet::new();
    let text = if params.sources.use_text_sinks { sinks.text() } else { &empty };
    let visual = if params.sources.use_image_sinks { sinks.visual() } else { &empty };
    let span = ctx.image_span();
    let keep = params.p;
    let moved = 1.0 - params.p;

    let seq_len = t.seq_len();
    let mut out = t.weights().to_vec();
    let mut rows = Vec::with_capacity(sel.len());
    let mut scratch = vec![0.0; seq_len];

    for &(h, s) in sel.pairs() {
        let start = t.offset(h, s);
        let original = &t.weights()[start..start + seq_len];
        scratch.copy_from_slice(original);
        let original_image_mass: f64 = original[span.clone()].iter().sum();

        let mut budget = 0.0;
        for i in text.iter() {
            scratch[i] = original[i] * keep;
            budget += original[i] * moved;
        }
        let mut zeroed = 0.0;
        for j in visual.iter() {
            zeroed += scratch[j];
            scratch[j] = 0.0;
        }
        let pre_image_mass: f64 = scratch[span.clone()].iter().sum();
        if pre_image_mass <= 0.0 {
            rows.push(RowReport {
                head: h,
                source: s,
                budget: 0.0,
                original_image_mass,
                pre_image_mass,
                post_image_mass: original_image_mass,
                zeroed_mass: 0.0,
                status: RowStatus::ZeroImageMass,
            });
            continue;
        }
        for i in span.clone() {
            let ratio = scratch[i] / pre_image_mass;
            scratch[i] += budget * ratio;
        }
        // A row nothing was taken from is already stochastic; leave its bits alone.
        if params.renormalize_rows && (budget != 0.0 || zeroed != 0.0) {
            let total: f64 = scratch.iter().sum();
            if total > 0.0 {
                for v in scratch.iter_mut() {
                    *v /= total;
                }
            }
        }
        let post_image_mass: f64 = scratch[span.clone()].iter().sum();
        out[start..start + seq_len].copy_from_slice(&scratch);
        rows.push(RowReport {
            head: h,
            source: s,
            budget,
            original_image_mass,
            pre_image_mass,
            post_image_mass,
            zeroed_mass: zeroed,
            status: RowStatus::Modified,
        });
    }

    let tensor = AttentionTensor::from_parts_unchecked(t.heads(), seq_len, out, t.layer_index());
    Ok((
        tensor,
        ReallocReport {
            layer_index: t.layer_index(),
            rows,
        },
    ))
}

/// Everything the pipeline decided for one layer.
#[derive(Debug, Clone)]
pub struct LayerIntervention {
    pub sinks: SinkPartition,
    pub scores: HeadScores,
    pub selection: HeadSelection,
    pub tensor: AttentionTensor,
    pub report: ReallocReport,
}

/// Detect, score, select and reallocate on a single layer.
pub fn intervene_layer(
    t: &AttentionTensor,
    ctx: &TokenContext,
    criterion: &SinkCriterion,
    config: &InterventionConfig,
) -> Result<LayerIntervention> {
    let detected = detect_sinks(ctx, criterion)?;
    let scores = score_heads(t, ctx, &detected, config.epsilon)?;
    let selection = if config.head_selection {
        select_visual_heads(&scores, config.rho, config.alpha, config.directions)
    } else {
        HeadSelection::all(t.heads(), t.seq_len())
    };
    let sinks = if config.token_selection {
        detected.clone()
    } else {
        let span = ctx.image_span();
        detected.with_text((0..ctx.seq_len()).filter(|i| !span.contains(i)).collect())
    };
    let (tensor, report) = reallocate(t, ctx, &sinks, &selection, &config.realloc_params())?;
    Ok(LayerIntervention {
        sinks: detected,
        scores,
        selection,
        tensor,
        report,
    })
}

/// Runs the pipeline on every layer in `config.layers`; other layers pass
/// through unchanged. One report per intervened layer.
pub fn apply_to_layer_stack(
    tensors: &[AttentionTensor],
    ctx: &TokenContext,
    criterion: &SinkCriterion,
    config: &InterventionConfig,
) -> Result<(Vec<AttentionTensor>, Vec<ReallocReport>)> {
    config.validate_for_layers(tensors.len())?;
    let mut out = Vec::with_capacity(tensors.len());
    let mut reports = Vec::with_capacity(config.layers.len());
    for (l, t) in tensors.iter().enumerate() {
        if config.layers.contains(l) {
            let li = intervene_layer(t, ctx, criterion, config)?;
            out.push(li.tensor);
            reports.push(li.report);
        } else {
            out.push(t.clone());
        }
    }
    Ok((out, reports))
}

impl SinkPartition {
    /// The sinks that actually feed reallocation under `sources`.
    pub fn restricted_to(&self, sources: SourceToggles) -> SinkPartition {
        match (sources.use_text_sinks, sources.use_image_sinks) {
            (true, true) => self.clone(),
            (true, false) => self.without_visual(),
            (false, true) => self.without_text(),
            (false, false) => SinkPartition::empty(),
        }
    }
}
