// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser bindings for the demo page in `www/`.
//!
//! Three operations are exposed, each returning a JSON string:
//!
//! * [`realloc_row`] reallocates a single hand-edited attention row;
//! * [`toy_attention`] runs the toy model on a benchmark sample and returns
//!   one head's attention map with and without intervention;
//! * [`head_scores`] returns relevance and sink-likelihood scores of every
//!   head for one layer, plus which rows were selected.
//!
//! The `*_json` functions hold the logic and are testable natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sinkshift::bench::run_base;
use sinkshift::{
    detect_sinks, generate_benchmark, reallocate, score_heads, select_visual_heads, AttentionTensor, GenParams,
    HeadSelection, IndexSet, InterventionConfig, LayerRange, ModelParams, ReallocParams, SinkPartition,
    TokenContext, TokenRole, ToyModel,
};

#[derive(Serialize)]
struct RowResult {
    row: Vec<f64>,
    budget: f64,
    zeroed: f64,
    sum: f64,
    skipped: bool,
}

/// `row` must sum to 1. The image span is `image_start..image_end`.
pub fn realloc_row_json(
    row: &[f64],
    image_start: usize,
    image_end: usize,
    visual_sinks: &[u32],
    text_sinks: &[u32],
    p: f64,
) -> Result<String, String> {
    let s = row.len();
    if s == 0 {
        return Err("row is empty".into());
    }
    let roles = (0..s)
        .map(|i| if (image_start..image_end).contains(&i) { TokenRole::Image } else { TokenRole::Question })
        .collect();
    let ctx = TokenContext::new(vec![0.0; s], 1, image_start..image_end, roles).map_err(|e| e.to_string())?;
    // The edited row sits at the last source; other rows are placeholders.
    let mut weights = vec![0.0; s * s];
    for r in 0..s.saturating_sub(1) {
        weights[r * s + r] = 1.0;
    }
    weights[(s - 1) * s..].copy_from_slice(row);
    let t = AttentionTensor::new(1, s, weights, 0).map_err(|e| e.to_string())?;
    let set = |v: &[u32]| IndexSet::from_unsorted(v.iter().map(|&i| i as usize));
    let sinks = SinkPartition::from_parts(set(visual_sinks), set(text_sinks), &ctx).map_err(|e| e.to_string())?;
    let params = ReallocParams { p, ..Default::default() };
    let (out, report) =
        reallocate(&t, &ctx, &sinks, &HeadSelection::from_pairs([(0, s - 1)]), &params).map_err(|e| e.to_string())?;
    let r = report.rows[0];
    let row = out.row(0, s - 1).to_vec();
    Ok(serde_json::to_string(&RowResult {
        sum: row.iter().sum(),
        row,
        budget: r.budget,
        zeroed: r.zeroed_mass,
        skipped: r.status != sinkshift::RowStatus::Modified,
    })
    .expect("serializable"))
}

/// Knobs shared by the toy-model operations.
#[derive(Debug, Clone, Copy)]
pub struct DemoKnobs {
    pub sample: u32,
    pub layer: usize,
    pub tau: f64,
    pub rho: f64,
    pub alpha: f64,
    pub p: f64,
}

impl DemoKnobs {
    fn config(&self) -> InterventionConfig {
        InterventionConfig {
            tau: self.tau,
            rho: self.rho,
            alpha: self.alpha,
            p: self.p,
            layers: LayerRange::new(0, 8),
            ..Default::default()
        }
    }

    fn round2(&self) -> Result<(ToyModel, TokenContext, usize), String> {
        let model = ToyModel::new(ModelParams::default()).map_err(|e| e.to_string())?;
        let sample = generate_benchmark(self.sample as u64, 1, &GenParams::default())
            .map_err(|e| e.to_string())?
            .remove(0);
        let base = run_base(&model, &sample).map_err(|e| e.to_string())?;
        if self.layer >= model.params().layers {
            return Err(format!("layer {} out of range", self.layer));
        }
        Ok((model, base.round2, sample.correct))
    }
}

#[derive(Serialize)]
struct AttentionResult {
    seq_len: usize,
    roles: Vec<TokenRole>,
    image_start: usize,
    image_end: usize,
    correct: usize,
    base: Vec<f64>,
    intervened: Vec<f64>,
    answer_base: usize,
    answer_intervened: usize,
    logits_base: Vec<f64>,
    logits_intervened: Vec<f64>,
}

/// One head's `S x S` map in `layer`, before and after intervening on
/// layers `0..=layer`.
pub fn toy_attention_json(knobs: DemoKnobs, head: usize) -> Result<String, String> {
    let (model, ctx, correct) = knobs.round2()?;
    if head >= model.params().heads {
        return Err(format!("head {head} out of range"));
    }
    let mut cfg = knobs.config();
    cfg.layers = LayerRange::new(0, knobs.layer + 1);
    let base = model.forward(&ctx, None).map_err(|e| e.to_string())?;
    let fixed = model.forward(&ctx, Some(&cfg)).map_err(|e| e.to_string())?;
    let s = ctx.seq_len();
    let map = |t: &AttentionTensor| t.weights()[head * s * s..(head + 1) * s * s].to_vec();
    Ok(serde_json::to_string(&AttentionResult {
        seq_len: s,
        roles: ctx.roles().to_vec(),
        image_start: ctx.image_span().start,
        image_end: ctx.image_span().end,
        correct,
        base: map(&base.attention[knobs.layer]),
        intervened: map(&fixed.attention[knobs.layer]),
        answer_base: base.answer(),
        answer_intervened: fixed.answer(),
        logits_base: base.logits,
        logits_intervened: fixed.logits,
    })
    .expect("serializable"))
}

#[derive(Serialize)]
struct ScoresResult {
    heads: usize,
    seq_len: usize,
    visual_sinks: Vec<usize>,
    text_sinks: Vec<usize>,
    /// `[H * S]`, row-major by head.
    delta: Vec<f64>,
    xi: Vec<f64>,
    selected: Vec<bool>,
}

pub fn head_scores_json(knobs: DemoKnobs) -> Result<String, String> {
    let (model, ctx, _) = knobs.round2()?;
    let cfg = knobs.config();
    cfg.validate().map_err(|e| e.to_string())?;
    let out = model.forward(&ctx, None).map_err(|e| e.to_string())?;
    let layer_ctx = ctx
        .with_embeddings(out.hidden_states[knobs.layer].clone())
        .map_err(|e| e.to_string())?;
    let t = &out.attention[knobs.layer];
    let sinks = detect_sinks(&layer_ctx, &cfg.criterion(layer_ctx.hidden()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let scores = score_heads(t, &layer_ctx, &sinks, cfg.epsilon).map_err(|e| e.to_string())?;
    let sel = select_visual_heads(&scores, cfg.rho, cfg.alpha, cfg.directions);
    let s = t.seq_len();
    Ok(serde_json::to_string(&ScoresResult {
        heads: t.heads(),
        seq_len: s,
        visual_sinks: sinks.visual().as_slice().to_vec(),
        text_sinks: sinks.text().as_slice().to_vec(),
        delta: scores.delta_matrix().to_vec(),
        xi: scores.xi_matrix().to_vec(),
        selected: (0..t.heads() * s).map(|i| sel.contains(i / s, i % s)).collect(),
    })
    .expect("serializable"))
}

#[wasm_bindgen]
pub fn realloc_row(
    row: Vec<f64>,
    image_start: usize,
    image_end: usize,
    visual_sinks: Vec<u32>,
    text_sinks: Vec<u32>,
    p: f64,
) -> Result<String, JsError> {
    realloc_row_json(&row, image_start, image_end, &visual_sinks, &text_sinks, p).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn toy_attention(
    sample: u32,
    layer: usize,
    head: usize,
    tau: f64,
    rho: f64,
    alpha: f64,
    p: f64,
) -> Result<String, JsError> {
    let knobs = DemoKnobs { sample, layer, tau, rho, alpha, p };
    toy_attention_json(knobs, head).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn head_scores(sample: u32, layer: usize, tau: f64, rho: f64, alpha: f64, p: f64) -> Result<String, JsError> {
    head_scores_json(DemoKnobs { sample, layer, tau, rho, alpha, p }).map_err(|e| JsError::new(&e))
}
