// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small seeded multi-head attention stack that stands in for a
//! multimodal LM.
//!
//! Nothing is trained. Weights are aligned by construction to a fixed
//! feature layout (see [`layout`]): each token carries a one-hot "kind"
//! feature scaled by a strength, an option-content vector, a few dims of
//! seeded noise and a sinusoidal position block. Keys expose the kind,
//! queries at the answer position score kinds with per-head preferences,
//! and values carry option content into a vote block that the linear
//! readout turns into option logits.
//!
//! Three head archetypes exist:
//!
//! * vision heads (front half only) look mostly at the salient image
//!   region but leak some attention to gaslight tokens;
//! * text heads follow the prior answer and, more weakly, the gaslight;
//! * sink heads park most of their attention on sink tokens and, of the
//!   remaining image mass, favour the distractor region.
//!
//! Hidden-state dimensions in the monitored set are never read or written
//! by any projection, so sink spikes survive unchanged through the stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{InterventionConfig, TOY_MONITORED_DIMS};
use crate::error::{Error, Result};
use crate::realloc::{intervene_layer, ReallocReport};
use crate::tensor::{AttentionTensor, TokenContext};

/// Fixed positions of the feature blocks in the hidden state.
pub mod layout {
    /// One dimension per [`super::TokenKind`].
    pub const KIND_BASE: usize = 0;
    /// Option content, one dimension per answer option.
    pub const CONTENT_BASE: usize = 16;
    pub const NOISE_BASE: usize = 32;
    pub const NOISE_DIMS: usize = 16;
    pub const POSITION_BASE: usize = 64;
    pub const POSITION_DIMS: usize = 16;
    /// Where attention outputs accumulate option votes.
    pub const VOTE_BASE: usize = 192;
    pub const MAX_OPTIONS: usize = 8;
    pub const MIN_HIDDEN: usize = 256;

    // Coordinates inside one head.
    pub(crate) const HEAD_NOISE_BASE: usize = 16;
    pub(crate) const HEAD_VALUE_BASE: usize = 32;
    pub(crate) const MIN_HEAD_DIM: usize = HEAD_VALUE_BASE + MAX_OPTIONS;
}

/// What a token is, as far as the toy model's weights are concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    System,
    Background,
    Salient,
    Distractor,
    VisualSink,
    Question,
    Option,
    PriorAnswer,
    GaslightKey,
    GaslightFiller,
    Query,
}

impl TokenKind {
    pub const ALL: [TokenKind; 11] = [
        Self::System,
        Self::Background,
        Self::Salient,
        Self::Distractor,
        Self::VisualSink,
        Self::Question,
        Self::Option,
        Self::PriorAnswer,
        Self::GaslightKey,
        Self::GaslightFiller,
        Self::Query,
    ];

    pub fn feature_dim(self) -> usize {
        layout::KIND_BASE + self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Vision,
    Text,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub options: usize,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            hidden: 256,
            options: 4,
            seed: 7,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.heads < 3 {
            return bad(format!("model needs at least 3 heads (got {})", self.heads));
        }
        if self.hidden < layout::MIN_HIDDEN || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size must be >= {} and divisible by the head count (got {} / {})",
                layout::MIN_HIDDEN,
                self.hidden,
                self.heads
            ));
        }
        if self.hidden / self.heads < layout::MIN_HEAD_DIM {
            return bad(format!(
                "head dimension {} is below the minimum of {}",
                self.hidden / self.heads,
                layout::MIN_HEAD_DIM
            ));
        }
        if !(2..=layout::MAX_OPTIONS).contains(&self.options) {
            return bad(format!("options must lie in 2..={}", layout::MAX_OPTIONS));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Vision heads live in the front half of the stack.
    pub fn head_kind(&self, layer: usize, head: usize) -> HeadKind {
        if head + 1 == self.heads {
            HeadKind::Sink
        } else if layer < self.layers / 2 && head < self.heads / 2 {
            HeadKind::Vision
        } else {
            HeadKind::Text
        }
    }
}

/// Attention preference per token kind, indexed like [`TokenKind::ALL`].
fn archetype(kind: HeadKind) -> [f64; 11] {
    // sys, bg, salient, distractor, vsink, question, option, prior, gkey, gfill, query
    match kind {
        HeadKind::Vision => [0.5, 0.6, 3.4, 1.0, -6.0, 0.0, 0.0, 2.2, 2.2, 0.2, 0.0],
        HeadKind::Text => [0.5, -1.0, 0.5, 0.8, -6.0, 0.5, 0.5, 3.0, 0.8, 0.8, 0.0],
        HeadKind::Sink => [5.0, -2.0, -2.0, 2.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    }
}

fn output_gain(kind: HeadKind, front: bool) -> f64 {
    match (kind, front) {
        (HeadKind::Vision, _) => 1.0,
        (HeadKind::Sink, _) => 3.0,
        (HeadKind::Text, true) => 0.4,
        (HeadKind::Text, false) => 0.25,
    }
}

const PREFERENCE_JITTER: f64 = 0.25;
const GAIN_JITTER: f64 = 0.1;
const QUERY_NOISE_SCALE: f64 = 0.25;
const KEY_NOISE_SCALE: f64 = 0.15;
const KEY_POSITION_SCALE: f64 = 0.1;

/// Dense `rows x cols` matrix that remembers which entries are non-zero.
#[derive(Debug, Clone)]
struct Projection {
    rows: usize,
    cols: usize,
    dense: Vec<f64>,
    sparse_rows: Vec<(usize, Vec<(usize, f64)>)>,
}

impl Projection {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            dense: vec![0.0; rows * cols],
            sparse_rows: Vec::new(),
        }
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.dense[r * self.cols + c] = v;
    }

    fn finish(mut self) -> Self {
        self.sparse_rows = (0..self.rows)
            .filter_map(|r| {
                let entries: Vec<(usize, f64)> = self.dense[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect();
                (!entries.is_empty()).then_some((r, entries))
            })
            .collect();
        self
    }

    /// `x [n x rows] * W [rows x cols]`, skipping structural zeros.
    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.cols];
        for t in 0..n {
            let xin = &x[t * self.rows..(t + 1) * self.rows];
            let o = &mut out[t * self.cols..(t + 1) * self.cols];
            for (r, entries) in &self.sparse_rows {
                let v = xin[*r];
                if v != 0.0 {
                    for &(c, w) in entries {
                        o[c] += v * w;
                    }
                }
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.dense.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    query: Projection,
    key: Projection,
    value: Projection,
    output: Projection,
    preferences: Vec<[f64; 11]>,
    gains: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    params: ModelParams,
    layers: Vec<Layer>,
    readout: Projection,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Post-softmax (and post-intervention) attention of every layer.
    pub attention: Vec<AttentionTensor>,
    /// Hidden state entering each layer, flat `[S * d]`.
    pub hidden_states: Vec<Vec<f64>>,
    /// One report per intervened layer.
    pub reports: Vec<ReallocReport>,
}

impl ForwardOutput {
    pub fn answer(&self) -> usize {
        argmax(&self.logits)
    }
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Sinusoidal code for position `pos`, `POSITION_DIMS` values.
pub fn positional_encoding(pos: usize) -> [f64; layout::POSITION_DIMS] {
    let mut out = [0.0; layout::POSITION_DIMS];
    for pair in 0..layout::POSITION_DIMS / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * pair as f64 / layout::POSITION_DIMS as f64);
        let angle = pos as f64 * freq;
        out[2 * pair] = angle.sin();
        out[2 * pair + 1] = angle.cos();
    }
    out
}

impl ToyModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let (d, h_count, dh) = (params.hidden, params.heads, params.head_dim());
        let key_scale = (dh as f64).sqrt();

        let mut layers = Vec::with_capacity(params.layers);
        for l in 0..params.layers {
            let front = l < params.layers / 2;
            let mut query = Projection::zeros(d, d);
            let mut key = Projection::zeros(d, d);
            let mut value = Projection::zeros(d, d);
            let mut output = Projection::zeros(d, d);
            let mut preferences = Vec::with_capacity(h_count);
            let mut gains = Vec::with_capacity(h_count);

            for h in 0..h_count {
                let kind = params.head_kind(l, h);
                let mut pref = archetype(kind);
                for p in pref.iter_mut() {
                    *p += PREFERENCE_JITTER * unit.sample(&mut rng);
                }
                let gain = output_gain(kind, front) * (1.0 + GAIN_JITTER * unit.sample(&mut rng));
                let col = h * dh;

                // Keys expose the kind one-hot; the answer query scores kinds.
                for kind in TokenKind::ALL {
                    let k = kind as usize;
                    key.set(kind.feature_dim(), col + k, key_scale);
                    query.set(TokenKind::Query.feature_dim(), col + k, pref[k]);
                }
                for r in 0..layout::NOISE_DIMS {
                    for c in 0..layout::NOISE_DIMS {
                        let row = layout::NOISE_BASE + r;
                        let hc = col + layout::HEAD_NOISE_BASE + c;
                        query.set(row, hc, QUERY_NOISE_SCALE * unit.sample(&mut rng));
                        key.set(row, hc, KEY_NOISE_SCALE * unit.sample(&mut rng));
                    }
                }
                for r in 0..layout::POSITION_DIMS {
                    for c in 0..layout::NOISE_DIMS {
                        let hc = col + layout::HEAD_NOISE_BASE + c;
                        key.set(layout::POSITION_BASE + r, hc, KEY_POSITION_SCALE * unit.sample(&mut rng));
                    }
                }
                for o in 0..params.options {
                    value.set(layout::CONTENT_BASE + o, col + layout::HEAD_VALUE_BASE + o, 1.0);
                    output.set(col + layout::HEAD_VALUE_BASE + o, layout::VOTE_BASE + o, gain);
                }
                preferences.push(pref);
                gains.push(gain);
            }
            layers.push(Layer {
                query: query.finish(),
                key: key.finish(),
                value: value.finish(),
                output: output.finish(),
                preferences,
                gains,
            });
        }

        let mut readout = Projection::zeros(d, params.options);
        for o in 0..params.options {
            readout.set(layout::VOTE_BASE + o, o, 1.0);
        }
        // A consumed draw keeps the stream position stable if weights grow.
        let _: u64 = rng.random();

        let model = Self {
            params,
            layers,
            readout: readout.finish(),
        };
        debug_assert!(model.weights_finite());
        Ok(model)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn monitored_dims(&self) -> Vec<usize> {
        TOY_MONITORED_DIMS.to_vec()
    }

    /// Per-kind attention preference of one head, indexed like [`TokenKind::ALL`].
    pub fn head_preferences(&self, layer: usize, head: usize) -> &[f64; 11] {
        &self.layers[layer].preferences[head]
    }

    pub fn head_gain(&self, layer: usize, head: usize) -> f64 {
        self.layers[layer].gains[head]
    }

    pub fn weights_finite(&self) -> bool {
        self.readout.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.query.is_finite() && l.key.is_finite() && l.value.is_finite() && l.output.is_finite())
    }

    /// Runs the stack on `ctx`. When `intervention` is given, in-range layers
    /// have their attention reallocated before values are aggregated.
    pub fn forward(&self, ctx: &TokenContext, intervention: Option<&InterventionConfig>) -> Result<ForwardOutput> {
        let p = &self.params;
        if ctx.hidden() != p.hidden {
            return Err(Error::ShapeMismatch(format!(
                "context has d = {}, model expects {}",
                ctx.hidden(),
                p.hidden
            )));
        }
        let criterion = match intervention {
            Some(cfg) => {
                cfg.validate_for_layers(p.layers)?;
                Some(cfg.criterion(p.hidden)?)
            }
            None => None,
        };
        let (s_len, d, dh) = (ctx.seq_len(), p.hidden, p.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = ctx.embeddings().to_vec();
        for pos in 0..s_len {
            let pe = positional_encoding(pos);
            for (i, v) in pe.iter().enumerate() {
                x[pos * d + layout::POSITION_BASE + i] += v;
            }
        }

        let mut attention = Vec::with_capacity(p.layers);
        let mut hidden_states = Vec::with_capacity(p.layers);
        let mut reports = Vec::new();
        let mut weights = vec![0.0; p.heads * s_len * s_len];
        let mut logits_row = vec![0.0; s_len];

        for (l, layer) in self.layers.iter().enumerate() {
            let q = layer.query.apply(&x, s_len);
            let k = layer.key.apply(&x, s_len);
            let v = layer.value.apply(&x, s_len);

            for h in 0..p.heads {
                let col = h * dh;
                for s in 0..s_len {
                    let qs = &q[s * d + col..s * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=s {
                        let kj = &k[j * d + col..j * d + col + dh];
                        let z = qs.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        logits_row[j] = z;
                        max = max.max(z);
                    }
                    let mut total = 0.0;
                    for z in logits_row[..=s].iter_mut() {
                        *z = (*z - max).exp();
                        total += *z;
                    }
                    let row = &mut weights[(h * s_len + s) * s_len..(h * s_len + s + 1) * s_len];
                    for j in 0..s_len {
                        row[j] = if j <= s { logits_row[j] / total } else { 0.0 };
                    }
                }
            }
            let base = AttentionTensor::from_parts_unchecked(p.heads, s_len, weights.clone(), l);

            let layer_ctx = ctx.with_embeddings(x.clone())?;
            let tensor = match (intervention, &criterion) {
                (Some(cfg), Some(crit)) if cfg.layers.contains(l) => {
                    let li = intervene_layer(&base, &layer_ctx, crit, cfg)?;
                    reports.push(li.report);
                    li.tensor
                }
                _ => base,
            };

            let mut heads_out = vec![0.0; s_len * d];
            for h in 0..p.heads {
                let col = h * dh;
                for s in 0..s_len {
                    let row = tensor.row(h, s);
                    let o = &mut heads_out[s * d + col..s * d + col + dh];
                    for (j, &a) in row.iter().enumerate() {
                        if a != 0.0 {
                            let vj = &v[j * d + col..j * d + col + dh];
                            for (oc, vc) in o.iter_mut().zip(vj) {
                                *oc += a * vc;
                            }
                        }
                    }
                }
            }
            let delta = layer.output.apply(&heads_out, s_len);
            hidden_states.push(layer_ctx.embeddings().to_vec());
            for (xi, di) in x.iter_mut().zip(&delta) {
                *xi += di;
            }
            attention.push(tensor);
        }

        let last = &x[(s_len - 1) * d..s_len * d];
        let logits = self.readout.apply(last, 1);
        Ok(ForwardOutput {
            logits,
            attention,
            hidden_states,
            reports,
        })
    }
}
