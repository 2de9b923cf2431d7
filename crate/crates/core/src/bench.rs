// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic two-round gaslighting benchmark for the toy model.
//!
//! Round one shows a system prompt, an image grid, a question and the
//! answer options. The model answers. Round two replays the same prefix,
//! appends the model's own answer and a short block of text pushing a
//! different option, then asks again.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{InterventionConfig, TOY_MONITORED_DIMS};
use crate::error::{Error, Result};
use crate::model::{layout, ModelParams, TokenKind, ToyModel};
use crate::realloc::ReallocReport;
use crate::tensor::{TokenContext, TokenRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub options: usize,
    pub system_tokens: usize,
    /// The image is a `grid_side x grid_side` block of tokens.
    pub grid_side: usize,
    pub salient_tokens: usize,
    pub distractor_tokens: usize,
    pub visual_sinks: usize,
    pub question_tokens: usize,
    pub gaslight_tokens: usize,
    /// Inclusive bounds on how many gaslight tokens are spiked sinks.
    pub gaslight_keys: (usize, usize),
    /// Normalized magnitude given to planted sinks.
    pub spike_score: f64,
    pub salient_strength: (f64, f64),
    pub distractor_strength: (f64, f64),
    pub distractor_content: (f64, f64),
    pub gaslight_strength: (f64, f64),
    pub gaslight_content: f64,
    pub filler_content: f64,
    pub prior_answer_content: f64,
    pub background_content: f64,
    pub feature_noise: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            options: 4,
            system_tokens: 2,
            grid_side: 6,
            salient_tokens: 4,
            distractor_tokens: 4,
            visual_sinks: 2,
            question_tokens: 5,
            gaslight_tokens: 4,
            gaslight_keys: (1, 2),
            spike_score: 30.0,
            salient_strength: (0.8, 1.2),
            distractor_strength: (0.7, 1.4),
            distractor_content: (1.0, 2.0),
            gaslight_strength: (1.0, 1.8),
            gaslight_content: 4.5,
            filler_content: 0.3,
            prior_answer_content: 3.0,
            background_content: 0.2,
            feature_noise: 1.0,
        }
    }
}

fn check_interval(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo <= hi {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be a finite interval lo <= hi (got {lo}, {hi})")))
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(2..=layout::MAX_OPTIONS).contains(&self.options) {
            return bad(format!("options must lie in 2..={}", layout::MAX_OPTIONS));
        }
        if self.system_tokens == 0 {
            return bad("at least one system token is required".into());
        }
        let cells = self.grid_side * self.grid_side;
        if cells == 0 || self.salient_tokens + self.distractor_tokens + self.visual_sinks > cells {
            return bad(format!(
                "{} salient + {} distractor + {} sink tokens do not fit a {} cell grid",
                self.salient_tokens, self.distractor_tokens, self.visual_sinks, cells
            ));
        }
        if self.salient_tokens == 0 {
            return bad("at least one salient image token is required".into());
        }
        let (klo, khi) = self.gaslight_keys;
        if klo > khi || khi > self.gaslight_tokens {
            return bad(format!(
                "gaslight key count {klo}..={khi} must fit in {} gaslight tokens",
                self.gaslight_tokens
            ));
        }
        if !(self.spike_score >= 0.0 && self.spike_score.is_finite()) {
            return bad(format!("spike_score must be finite and >= 0 (got {})", self.spike_score));
        }
        check_interval("salient_strength", self.salient_strength)?;
        check_interval("distractor_strength", self.distractor_strength)?;
        check_interval("distractor_content", self.distractor_content)?;
        check_interval("gaslight_strength", self.gaslight_strength)?;
        for (name, v) in [
            ("gaslight_content", self.gaslight_content),
            ("filler_content", self.filler_content),
            ("prior_answer_content", self.prior_answer_content),
            ("background_content", self.background_content),
            ("feature_noise", self.feature_noise),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    pub fn check_model(&self, model: &ModelParams) -> Result<()> {
        if self.options != model.options {
            return Err(Error::InvalidParams(format!(
                "generator has {} options but the model reads out {}",
                self.options, model.options
            )));
        }
        Ok(())
    }
}

/// Everything needed to embed one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub kind: TokenKind,
    pub strength: f64,
    /// Option index and amount of content pointing at it.
    pub content: Option<(usize, f64)>,
    pub spiked: bool,
    pub noise: Vec<f64>,
    /// Small values for the monitored dims when not spiked.
    pub rest: [f64; 2],
}

impl TokenSpec {
    fn embed_into(&self, out: &mut [f64], spike_value: f64, monitored: usize) {
        out[self.kind.feature_dim()] = self.strength;
        if let Some((opt, amount)) = self.content {
            out[layout::CONTENT_BASE + opt] += amount;
        }
        for (i, v) in self.noise.iter().enumerate() {
            out[layout::NOISE_BASE + i] = *v;
        }
        for (slot, dim) in TOY_MONITORED_DIMS.iter().enumerate() {
            out[*dim] = self.rest[slot];
        }
        if self.spiked {
            out[TOY_MONITORED_DIMS[monitored]] = spike_value;
        }
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaslightSample {
    pub index: usize,
    pub correct: usize,
    pub gaslight_target: usize,
    pub options: usize,
    pub spike_score: f64,
    pub prior_answer_content: f64,
    system: Vec<TokenSpec>,
    image: Vec<TokenSpec>,
    question: Vec<TokenSpec>,
    option_tokens: Vec<TokenSpec>,
    prior_answer: TokenSpec,
    gaslight: Vec<TokenSpec>,
    query: TokenSpec,
}

impl GaslightSample {
    pub fn image_span(&self) -> Range<usize> {
        let start = self.system.len();
        start..start + self.image.len()
    }

    pub fn image_tokens(&self) -> &[TokenSpec] {
        &self.image
    }

    pub fn gaslight_tokens(&self) -> &[TokenSpec] {
        &self.gaslight
    }

    /// System prompt, image, question, options and the answer query.
    pub fn round1_context(&self, hidden: usize) -> Result<TokenContext> {
        self.build(hidden, None)
    }

    /// Round one's prefix, then `prior_answer`, the gaslight block and the query.
    pub fn round2_context(&self, hidden: usize, prior_answer: usize) -> Result<TokenContext> {
        if prior_answer >= self.options {
            return Err(Error::IndexOutOfRange {
                what: "prior answer",
                index: prior_answer,
                len: self.options,
            });
        }
        self.build(hidden, Some(prior_answer))
    }

    fn build(&self, hidden: usize, prior: Option<usize>) -> Result<TokenContext> {
        if hidden < layout::MIN_HIDDEN {
            return Err(Error::DimensionMismatch(format!(
                "benchmark tokens need d >= {}, got {hidden}",
                layout::MIN_HIDDEN
            )));
        }
        let mut tokens: Vec<(TokenRole, TokenSpec, usize)> = Vec::new();
        let mut push = |role, spec: &TokenSpec, monitored| tokens.push((role, spec.clone(), monitored));
        for t in &self.system {
            push(TokenRole::System, t, 0);
        }
        for t in &self.image {
            push(TokenRole::Image, t, 1);
        }
        for t in &self.question {
            push(TokenRole::Question, t, 0);
        }
        for t in &self.option_tokens {
            push(TokenRole::Option, t, 0);
        }
        if let Some(answer) = prior {
            let mut spec = self.prior_answer.clone();
            spec.content = Some((answer, self.prior_answer_content));
            push(TokenRole::Answer, &spec, 0);
            for t in &self.gaslight {
                push(TokenRole::Gaslight, t, 0);
            }
        }
        push(TokenRole::Answer, &self.query, 0);

        let spike_value = self.spike_score * (hidden as f64).sqrt();
        let mut embeddings = vec![0.0; tokens.len() * hidden];
        for (i, (_, spec, monitored)) in tokens.iter().enumerate() {
            spec.embed_into(&mut embeddings[i * hidden..(i + 1) * hidden], spike_value, *monitored);
        }
        let roles = tokens.into_iter().map(|(r, _, _)| r).collect();
        TokenContext::new(embeddings, hidden, self.image_span(), roles)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn token(rng: &mut ChaCha8Rng, noise: &Normal<f64>, kind: TokenKind, strength: f64) -> TokenSpec {
    TokenSpec {
        kind,
        strength,
        content: None,
        spiked: false,
        noise: (0..layout::NOISE_DIMS).map(|_| noise.sample(rng)).collect(),
        rest: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
    }
}

fn generate_one(index: usize, seed: u64, p: &GenParams) -> GaslightSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, p.feature_noise.abs()).expect("finite noise scale");
    let k = p.options;
    let correct = rng.random_range(0..k);
    let gaslight_target = (correct + rng.random_range(1..k)) % k;

    let system = (0..p.system_tokens)
        .map(|i| {
            let mut t = token(&mut rng, &noise, TokenKind::System, 1.0);
            t.spiked = i == 0;
            t
        })
        .collect();

    let cells = p.grid_side * p.grid_side;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut kinds = vec![TokenKind::Background; cells];
    let mut cursor = order.iter();
    for (kind, count) in [
        (TokenKind::Salient, p.salient_tokens),
        (TokenKind::Distractor, p.distractor_tokens),
        (TokenKind::VisualSink, p.visual_sinks),
    ] {
        for cell in cursor.by_ref().take(count) {
            kinds[*cell] = kind;
        }
    }
    let image = kinds
        .into_iter()
        .map(|kind| match kind {
            TokenKind::Salient => {
                let s = uniform(&mut rng, p.salient_strength);
                let mut t = token(&mut rng, &noise, kind, s);
                t.content = Some((correct, 1.0));
                t
            }
            TokenKind::Distractor => {
                let s = uniform(&mut rng, p.distractor_strength);
                let c = uniform(&mut rng, p.distractor_content);
                let mut t = token(&mut rng, &noise, kind, s);
                t.content = Some((gaslight_target, c));
                t
            }
            TokenKind::VisualSink => {
                let mut t = token(&mut rng, &noise, kind, 1.0);
                t.spiked = true;
                t
            }
            _ => {
                let opt = rng.random_range(0..k);
                let mut t = token(&mut rng, &noise, kind, 1.0);
                t.content = Some((opt, p.background_content));
                t
            }
        })
        .collect();

    let question = (0..p.question_tokens)
        .map(|_| token(&mut rng, &noise, TokenKind::Question, 1.0))
        .collect();
    let option_tokens = (0..k)
        .map(|o| {
            let mut t = token(&mut rng, &noise, TokenKind::Option, 1.0);
            t.content = Some((o, 0.5));
            t
        })
        .collect();
    let prior_answer = token(&mut rng, &noise, TokenKind::PriorAnswer, 1.0);

    let keys = rng.random_range(p.gaslight_keys.0..=p.gaslight_keys.1);
    let mut slots: Vec<usize> = (0..p.gaslight_tokens).collect();
    slots.shuffle(&mut rng);
    let key_slots = &slots[..keys];
    let gaslight = (0..p.gaslight_tokens)
        .map(|i| {
            if key_slots.contains(&i) {
                let g = uniform(&mut rng, p.gaslight_strength);
                let mut t = token(&mut rng, &noise, TokenKind::GaslightKey, g);
                t.content = Some((gaslight_target, p.gaslight_content));
                t.spiked = true;
                t
            } else {
                let mut t = token(&mut rng, &noise, TokenKind::GaslightFiller, 1.0);
                t.content = Some((gaslight_target, p.filler_content));
                t
            }
        })
        .collect();
    let query = token(&mut rng, &noise, TokenKind::Query, 1.0);

    GaslightSample {
        index,
        correct,
        gaslight_target,
        options: k,
        spike_score: p.spike_score,
        prior_answer_content: p.prior_answer_content,
        system,
        image,
        question,
        option_tokens,
        prior_answer,
        gaslight,
        query,
    }
}

/// `n` samples. Sample `i` depends only on `seed` and `i`.
pub fn generate_benchmark(seed: u64, n: usize, params: &GenParams) -> Result<Vec<GaslightSample>> {
    params.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| generate_one(i, master.random(), params)).collect())
}

/// Unintervened answers for both rounds.
#[derive(Debug, Clone)]
pub struct BaseOutcome {
    pub answer_before: usize,
    pub answer_after_base: usize,
    pub round2: TokenContext,
}

pub fn run_base(model: &ToyModel, sample: &GaslightSample) -> Result<BaseOutcome> {
    if sample.options != model.params().options {
        return Err(Error::InvalidParams(format!(
            "sample has {} options but the model reads out {}",
            sample.options,
            model.params().options
        )));
    }
    let hidden = model.params().hidden;
    let answer_before = model.forward(&sample.round1_context(hidden)?, None)?.answer();
    let round2 = sample.round2_context(hidden, answer_before)?;
    let answer_after_base = model.forward(&round2, None)?.answer();
    Ok(BaseOutcome {
        answer_before,
        answer_after_base,
        round2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub correct: usize,
    pub gaslight_target: usize,
    pub answer_before: usize,
    pub answer_after_base: usize,
    pub answer_after_eraser: usize,
    #[serde(skip)]
    pub reports: Vec<ReallocReport>,
}

impl EpisodeResult {
    pub fn correct_before(&self) -> bool {
        self.answer_before == self.correct
    }

    pub fn correct_after_base(&self) -> bool {
        self.answer_after_base == self.correct
    }

    pub fn correct_after_eraser(&self) -> bool {
        self.answer_after_eraser == self.correct
    }
}

/// Intervened round-two answer on top of a precomputed base outcome.
pub fn run_with_base(
    model: &ToyModel,
    sample: &GaslightSample,
    base: &BaseOutcome,
    config: &InterventionConfig,
) -> Result<EpisodeResult> {
    let out = model.forward(&base.round2, Some(config))?;
    Ok(EpisodeResult {
        index: sample.index,
        correct: sample.correct,
        gaslight_target: sample.gaslight_target,
        answer_before: base.answer_before,
        answer_after_base: base.answer_after_base,
        answer_after_eraser: out.answer(),
        reports: out.reports,
    })
}

/// Round one, round two without intervention, round two with `config`.
pub fn run_episode(model: &ToyModel, sample: &GaslightSample, config: &InterventionConfig) -> Result<EpisodeResult> {
    let base = run_base(model, sample)?;
    run_with_base(model, sample, &base, config)
}
