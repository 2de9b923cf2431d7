// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmark runs, ablations, layer sweeps and trace tooling.
//!
//! A run is described by a [`RunConfig`], stored as TOML:
//!
//! ```toml
//! n = 200
//! seed = 1
//! workers = 1
//!
//! [model]
//! layers = 8
//! heads = 4
//! hidden = 256
//! options = 4
//! seed = 7
//!
//! [generator]
//! spike_score = 30.0
//!
//! [intervention]
//! tau = 20.0
//! rho = 0.6
//! alpha = 0.005
//! p = 0.6
//! layers = "0:4"
//! ```
//!
//! Every table and key is optional; missing ones take their defaults.

use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::bench::{generate_benchmark, run_base, run_with_base, BaseOutcome, EpisodeResult, GaslightSample, GenParams};
use crate::config::{InterventionConfig, LayerRange, SourceToggles};
use crate::error::{Error, Result};
use crate::heads::{score_heads, select_visual_heads, HeadSelection};
use crate::metrics::{summarize, BenchSummary};
use crate::model::{ModelParams, ToyModel};
use crate::realloc::reallocate;
use crate::sink::detect_sinks;
use crate::trace::{read_trace, write_trace, Trace, TraceMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Benchmark size.
    pub n: usize,
    /// Seed of the benchmark generator.
    pub seed: u64,
    /// Worker threads. Results do not depend on it.
    pub workers: usize,
    pub model: ModelParams,
    pub generator: GenParams,
    pub intervention: InterventionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 1,
            workers: 1,
            model: ModelParams::default(),
            generator: GenParams::default(),
            intervention: InterventionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        self.model.validate()?;
        self.generator.validate()?;
        self.generator.check_model(&self.model)?;
        self.intervention.validate_for_layers(self.model.layers)
    }
}

/// Applies `f` to every item on up to `workers` threads, keeping input order.
/// With one worker no thread is spawned.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("benchmark worker panicked")?);
        }
        Ok(out)
    })
}

/// A generated benchmark with its unintervened outcomes, reusable across
/// intervention settings.
pub struct Harness {
    pub config: RunConfig,
    pub model: ToyModel,
    pub samples: Vec<GaslightSample>,
    bases: Vec<BaseOutcome>,
}

impl Harness {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ToyModel::new(config.model.clone())?;
        let samples = generate_benchmark(config.seed, config.n, &config.generator)?;
        let bases = parallel_map(&samples, config.workers, |s| run_base(&model, s))?;
        Ok(Self {
            config: config.clone(),
            model,
            samples,
            bases,
        })
    }

    pub fn evaluate(&self, intervention: &InterventionConfig) -> Result<Vec<EpisodeResult>> {
        intervention.validate_for_layers(self.model.params().layers)?;
        let pairs: Vec<(&GaslightSample, &BaseOutcome)> = self.samples.iter().zip(&self.bases).collect();
        parallel_map(&pairs, self.config.workers, |(s, b)| {
            run_with_base(&self.model, s, b, intervention)
        })
    }

    pub fn summary(&self, intervention: &InterventionConfig) -> Result<BenchSummary> {
        summarize(&self.evaluate(intervention)?)
    }
}

/// One CSV line per episode.
#[derive(Debug, Clone, Serialize)]
struct EpisodeRow {
    index: usize,
    correct: usize,
    gaslight_target: usize,
    answer_before: usize,
    answer_after_base: usize,
    answer_after_eraser: usize,
    modified_rows: usize,
    skipped_rows: usize,
    budget: f64,
    directions: &'static str,
}

impl EpisodeRow {
    fn new(e: &EpisodeResult, directions: &'static str) -> Self {
        Self {
            index: e.index,
            correct: e.correct,
            gaslight_target: e.gaslight_target,
            answer_before: e.answer_before,
            answer_after_base: e.answer_after_base,
            answer_after_eraser: e.answer_after_eraser,
            modified_rows: e.reports.iter().map(|r| r.modified_rows()).sum(),
            skipped_rows: e.reports.iter().map(|r| r.skipped_rows()).sum(),
            budget: e.reports.iter().map(|r| r.total_budget()).sum(),
            directions,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub summary: BenchSummary,
    pub episodes: Vec<EpisodeResult>,
}

/// Runs the benchmark. With `out_dir`, writes `episodes.csv`,
/// `summary.json` and the exact `config.toml` used.
pub fn cmd_bench(config: &RunConfig, out_dir: Option<&Path>) -> Result<BenchOutput> {
    let harness = Harness::prepare(config)?;
    let episodes = harness.evaluate(&config.intervention)?;
    let summary = summarize(&episodes)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("episodes.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for e in &episodes {
            w.serialize(EpisodeRow::new(e, config.intervention.directions.label()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        write_text(&dir.join("summary.json"), &to_json(&summary))?;
        write_text(&dir.join("config.toml"), &config.to_toml())?;
    }
    Ok(BenchOutput { summary, episodes })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub first: bool,
    pub second: bool,
    /// Which selection rule produced the row.
    pub directions: &'static str,
    pub summary: BenchSummary,
}

impl AblationRow {
    pub fn accuracy(&self) -> f64 {
        self.summary.acc_after_eraser
    }
}

fn ablation(config: &RunConfig, label: &str, set: impl Fn(&mut InterventionConfig, bool, bool)) -> Result<Vec<AblationRow>> {
    let harness = Harness::prepare(config)?;
    let mut rows = Vec::with_capacity(4);
    for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut icfg = config.intervention.clone();
        set(&mut icfg, a, b);
        rows.push(AblationRow {
            label: label.to_string(),
            first: a,
            second: b,
            directions: icfg.directions.label(),
            summary: harness.summary(&icfg)?,
        });
    }
    Ok(rows)
}

/// Text-sink and image-sink sources toggled on and off. `first` is text.
pub fn cmd_ablate_sources(config: &RunConfig) -> Result<Vec<AblationRow>> {
    ablation(config, "text,image", |c, text, image| {
        c.sources = SourceToggles {
            use_text_sinks: text,
            use_image_sinks: image,
        }
    })
}

/// Head selection and token selection toggled on and off. `first` is heads.
pub fn cmd_ablate_components(config: &RunConfig) -> Result<Vec<AblationRow>> {
    ablation(config, "heads,tokens", |c, heads, tokens| {
        c.head_selection = heads;
        c.token_selection = tokens;
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub layers: LayerRange,
    pub directions: &'static str,
    pub summary: BenchSummary,
}

/// Front-`k` layer ranges for `k` in `{0, L/4, L/2, 3L/4, L}`, or every
/// `k` in `0..=L` when `fine` is set.
pub fn cmd_layer_sweep(config: &RunConfig, fine: bool) -> Result<Vec<SweepPoint>> {
    let harness = Harness::prepare(config)?;
    let l = config.model.layers;
    let mut ks: Vec<usize> = if fine {
        (0..=l).collect()
    } else {
        vec![0, l / 4, l / 2, 3 * l / 4, l]
    };
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let icfg = InterventionConfig {
                layers: LayerRange::front(k),
                ..config.intervention.clone()
            };
            Ok(SweepPoint {
                layers: icfg.layers,
                directions: icfg.directions.label(),
                summary: harness.summary(&icfg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub in_range: bool,
    pub visual_sinks: Vec<usize>,
    pub text_sinks: Vec<usize>,
    pub selected_rows: usize,
    pub selected_heads: Vec<usize>,
    pub mean_delta: f64,
    pub mean_xi: f64,
    pub modified_rows: usize,
    pub skipped_rows: usize,
    pub total_budget: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    pub model: String,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub intervention: InterventionConfig,
    pub per_layer: Vec<LayerAnalysis>,
}

/// Runs detection, scoring, selection and reallocation on every layer of a
/// stored trace. `monitored_dims` from the trace's metadata override the
/// config's when `use_trace_dims` is set.
pub fn analyze_trace(trace: &Trace, config: &InterventionConfig, use_trace_dims: bool) -> Result<TraceReport> {
    let mut config = config.clone();
    if use_trace_dims {
        config.monitored_dims = trace.meta.monitored_dims.clone();
    }
    config.validate_for_layers(trace.layers())?;
    let criterion = config.criterion(trace.hidden)?;
    let per_layer = trace
        .attention
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let ctx = trace.context(l)?;
            let sinks = detect_sinks(&ctx, &criterion)?;
            let scores = score_heads(t, &ctx, &sinks, config.epsilon)?;
            let selection = if config.head_selection {
                select_visual_heads(&scores, config.rho, config.alpha, config.directions)
            } else {
                HeadSelection::all(t.heads(), t.seq_len())
            };
            let (_, report) = reallocate(t, &ctx, &sinks, &selection, &config.realloc_params())?;
            let cells = scores.delta_matrix().len() as f64;
            let mut heads: Vec<usize> = selection.pairs().iter().map(|(h, _)| *h).collect();
            heads.dedup();
            Ok(LayerAnalysis {
                layer: l,
                in_range: config.layers.contains(l),
                visual_sinks: sinks.visual().as_slice().to_vec(),
                text_sinks: sinks.text().as_slice().to_vec(),
                selected_rows: selection.len(),
                selected_heads: heads,
                mean_delta: scores.delta_matrix().iter().sum::<f64>() / cells,
                mean_xi: scores.xi_matrix().iter().sum::<f64>() / cells,
                modified_rows: report.modified_rows(),
                skipped_rows: report.skipped_rows(),
                total_budget: report.total_budget(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceReport {
        model: trace.meta.model.clone(),
        layers: trace.layers(),
        heads: trace.heads(),
        seq_len: trace.seq_len(),
        intervention: config,
        per_layer,
    })
}

pub fn cmd_analyze_trace(path: &Path, config: &InterventionConfig, use_trace_dims: bool) -> Result<TraceReport> {
    analyze_trace(&read_trace(path)?, config, use_trace_dims)
}

/// Round-two context of one benchmark sample, run without intervention.
pub fn capture_trace(config: &RunConfig, sample_index: usize) -> Result<Trace> {
    config.validate()?;
    if sample_index >= config.n {
        return Err(Error::IndexOutOfRange {
            what: "sample",
            index: sample_index,
            len: config.n,
        });
    }
    let model = ToyModel::new(config.model.clone())?;
    let sample = generate_benchmark(config.seed, sample_index + 1, &config.generator)?.pop().expect("one sample");
    let base = run_base(&model, &sample)?;
    let out = model.forward(&base.round2, None)?;
    Ok(Trace {
        meta: TraceMeta {
            model: format!("toy-{}x{}-seed{}", config.model.layers, config.model.heads, config.model.seed),
            monitored_dims: model.monitored_dims(),
            roles: base.round2.roles().to_vec(),
        },
        hidden: config.model.hidden,
        image_span: base.round2.image_span(),
        hidden_states: out.hidden_states,
        attention: out.attention,
    })
}

pub fn cmd_export_trace(config: &RunConfig, sample_index: usize, path: &Path) -> Result<Trace> {
    let trace = capture_trace(config, sample_index)?;
    write_trace(path, &trace)?;
    Ok(trace)
}
