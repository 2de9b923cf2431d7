// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sinkshift::bench::GenParams;
use sinkshift::harness::{capture_trace, Harness, RunConfig};
use sinkshift::heads::{select_visual_heads, Comparison, Directions, HeadScores};
use sinkshift::metrics::BenchSummary;
use sinkshift::model::ToyModel;
use sinkshift::realloc::{intervene_layer, reallocate, ReallocParams, RowStatus};
use sinkshift::sink::{detect_sinks, NormMode, SinkCriterion};
use sinkshift::trace::{read_trace, write_trace};
use sinkshift::{
    AttentionTensor, HeadSelection, IndexSet, InterventionConfig, LayerRange, SinkPartition, SourceToggles,
    TokenContext, TokenRole,
};

const ORACLE_CASES: usize = 1000;
const ORACLE_TOLERANCE: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const WORKED_TOLERANCE: f64 = 1e-12;
const MASS_TOLERANCE: f64 = 1e-9;
const MONOTONE_CASES: usize = 500;
const HEADLINE_REDUCTION: (f64, f64) = (48.2, 0.1);
const HEADLINE_GAIN: (f64, f64) = (18.57, 0.01);
const BENCH_N: usize = 200;
const BENCH_SEED: u64 = 1;
const MIN_BASE_MISGUIDANCE: f64 = 0.30;
const MIN_REDUCTION: f64 = 0.40;
const SWEEP_SLACK_POINTS: f64 = 1.0;
const BENCH_BUDGET: Duration = Duration::from_secs(120);
const TRACE_TOLERANCE: f64 = 1e-4;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

/// A random stochastic tensor with an exact zero sprinkled in now and then.
fn random_tensor(rng: &mut ChaCha8Rng, heads: usize, s: usize) -> AttentionTensor {
    let mut w = Vec::with_capacity(heads * s * s);
    for _ in 0..heads * s {
        let mut row: Vec<f64> = (0..s)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        if row.iter().all(|v| *v == 0.0) {
            row[0] = 1.0;
        }
        let total: f64 = row.iter().sum();
        w.extend(row.into_iter().map(|v| v / total));
    }
    AttentionTensor::new(heads, s, w, 0).expect("normalized rows")
}

struct Case {
    tensor: AttentionTensor,
    ctx: TokenContext,
    sinks: SinkPartition,
    selection: HeadSelection,
    params: ReallocParams,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let heads = rng.random_range(1..=2);
    let s = rng.random_range(1..=8);
    let start = rng.random_range(0..s);
    let end = rng.random_range(start + 1..=s);
    let roles = (0..s)
        .map(|i| if (start..end).contains(&i) { TokenRole::Image } else { TokenRole::Question })
        .collect();
    let ctx = TokenContext::new(vec![0.0; s], 1, start..end, roles).unwrap();
    let visual = IndexSet::from_unsorted((start..end).filter(|_| rng.random_bool(0.3)));
    let text = IndexSet::from_unsorted((0..s).filter(|i| !(start..end).contains(i) && rng.random_bool(0.5)));
    let sinks = SinkPartition::from_parts(visual, text, &ctx).unwrap();
    let mut pairs = Vec::new();
    for h in 0..heads {
        for src in 0..s {
            if rng.random_bool(0.5) {
                pairs.push((h, src));
            }
        }
    }
    let p = if rng.random_bool(0.1) { 1.0 } else { rng.random_range(0.01..1.0) };
    Case {
        tensor: random_tensor(rng, heads, s),
        ctx,
        sinks,
        selection: HeadSelection::from_pairs(pairs),
        params: ReallocParams {
            p,
            sources: SourceToggles::default(),
            renormalize_rows: rng.random_bool(0.3),
        },
    }
}

/// Direct scalar transcription of the reallocation steps, one row at a time.
#[allow(clippy::needless_range_loop)]
fn oracle(case: &Case) -> Vec<f64> {
    let t = &case.tensor;
    let (h_count, s) = (t.heads(), t.seq_len());
    let span = case.ctx.image_span();
    let p = case.params.p;
    let mut out = t.weights().to_vec();
    for h in 0..h_count {
        for src in 0..s {
            if !case.selection.contains(h, src) {
                continue;
            }
            let old: Vec<f64> = (0..s).map(|j| t.get(h, src, j)).collect();
            let mut a = old.clone();
            let mut omega = 0.0;
            for j in 0..s {
                if case.sinks.text().contains(j) {
                    a[j] = old[j] * p;
                    omega += old[j] * (1.0 - p);
                }
            }
            for j in 0..s {
                if case.sinks.visual().contains(j) {
                    a[j] = 0.0;
                }
            }
            let mut image_mass = 0.0;
            for j in span.clone() {
                image_mass += a[j];
            }
            if image_mass <= 0.0 {
                continue;
            }
            let mut b = a.clone();
            for j in span.clone() {
                b[j] = a[j] + omega * (a[j] / image_mass);
            }
            if case.params.renormalize_rows {
                let total: f64 = b.iter().sum();
                for v in b.iter_mut() {
                    *v /= total;
                }
            }
            for j in 0..s {
                out[(h * s + src) * s + j] = b[j];
            }
        }
    }
    out
}

fn oracle_and_mass() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let started = Instant::now();
    let mut max_err: f64 = 0.0;
    let mut max_mass_err: f64 = 0.0;
    let mut rows_checked = 0usize;
    for _ in 0..ORACLE_CASES {
        let case = random_case(&mut rng);
        let (got, report) =
            reallocate(&case.tensor, &case.ctx, &case.sinks, &case.selection, &case.params).unwrap();
        let want = oracle(&case);
        for (a, b) in got.weights().iter().zip(&want) {
            max_err = max_err.max((a - b).abs());
        }
        for row in &report.rows {
            let sum: f64 = got.row(row.head, row.source).iter().sum();
            let target = match (row.status, case.params.renormalize_rows) {
                (RowStatus::ZeroImageMass, _) | (_, true) => 1.0,
                (RowStatus::Modified, false) => 1.0 - row.zeroed_mass,
            };
            max_mass_err = max_mass_err.max((sum - target).abs());
            rows_checked += 1;
        }
    }
    let elapsed = started.elapsed();
    vec![
        outcome(
            "oracle equivalence",
            max_err <= ORACLE_TOLERANCE && elapsed < ORACLE_BUDGET,
            format!(
                "{ORACLE_CASES} random cases, max |diff| {max_err:.2e} (tol {ORACLE_TOLERANCE:.0e}), {:.2}s (budget {}s)",
                elapsed.as_secs_f64(),
                ORACLE_BUDGET.as_secs()
            ),
        ),
        outcome(
            "mass accounting",
            max_mass_err <= MASS_TOLERANCE,
            format!("{rows_checked} selected rows, max |sum - expected| {max_mass_err:.2e} (tol {MASS_TOLERANCE:.0e})"),
        ),
    ]
}

fn worked_example() -> Outcome {
    let roles = [vec![TokenRole::Image; 4], vec![TokenRole::Question, TokenRole::Answer]].concat();
    let ctx = TokenContext::new(vec![0.0; 6], 1, 0..4, roles).unwrap();
    let mut w = vec![0.0; 36];
    for r in 0..5 {
        w[r * 6 + r] = 1.0;
    }
    w[30..36].copy_from_slice(&[0.15, 0.15, 0.10, 0.10, 0.20, 0.30]);
    let t = AttentionTensor::new(1, 6, w, 0).unwrap();
    let sinks = SinkPartition::from_parts(IndexSet::from_unsorted([2]), IndexSet::from_unsorted([4]), &ctx).unwrap();
    let sel = HeadSelection::from_pairs([(0, 5)]);
    let (out, report) = reallocate(&t, &ctx, &sinks, &sel, &ReallocParams::default()).unwrap();
    let want = [0.18, 0.18, 0.0, 0.12, 0.12, 0.30];
    let err = out.row(0, 5).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let budget_err = (report.rows[0].budget - 0.08).abs();
    let sum: f64 = out.row(0, 5).iter().sum();
    outcome(
        "worked example",
        err <= WORKED_TOLERANCE && budget_err <= WORKED_TOLERANCE && (sum - 0.9).abs() <= WORKED_TOLERANCE,
        format!("row {:?}, max |diff| {err:.1e}, budget {:.4}, sum {sum:.4}", out.row(0, 5), report.rows[0].budget),
    )
}

fn identity_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    let mut checks = 0;
    for _ in 0..200 {
        let case = random_case(&mut rng);
        let text_only = SinkPartition::from_parts(IndexSet::new(), case.sinks.text().clone(), &case.ctx).unwrap();
        let sentinel = ReallocParams { p: 1.0, ..case.params };
        let variants = [
            ("empty sinks", SinkPartition::empty(), case.selection.clone(), case.params),
            ("empty selection", case.sinks.clone(), HeadSelection::empty(), case.params),
            ("p = 1 on text sinks", text_only, case.selection.clone(), ReallocParams { renormalize_rows: false, ..sentinel }),
        ];
        for (name, sinks, sel, params) in variants {
            let (out, _) = reallocate(&case.tensor, &case.ctx, &sinks, &sel, &params).unwrap();
            checks += 1;
            if out.weights() != case.tensor.weights() {
                failures.push(name);
            }
        }
    }

    // Model level: absent intervention, empty layer range, sink-free input.
    let run = RunConfig::default();
    let model = ToyModel::new(run.model.clone()).unwrap();
    let samples = sinkshift::generate_benchmark(run.seed, 8, &run.generator).unwrap();
    let quiet = sinkshift::generate_benchmark(run.seed, 8, &GenParams { spike_score: 0.0, ..run.generator.clone() }).unwrap();
    let empty_range = InterventionConfig {
        layers: LayerRange::empty(),
        ..Default::default()
    };
    let on = InterventionConfig::default();
    for (s, q) in samples.iter().zip(&quiet) {
        let ctx = s.round2_context(256, s.correct).unwrap();
        let off = model.forward(&ctx, None).unwrap();
        let empty = model.forward(&ctx, Some(&empty_range)).unwrap();
        checks += 1;
        if off.logits != empty.logits || off.attention != empty.attention {
            failures.push("empty layer range");
        }
        let qctx = q.round2_context(256, q.correct).unwrap();
        checks += 1;
        if model.forward(&qctx, None).unwrap().logits != model.forward(&qctx, Some(&on)).unwrap().logits {
            failures.push("sink-free input");
        }
    }
    failures.dedup();
    outcome(
        "identity suite",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checks} bitwise checks (empty sinks, empty selection, empty layer range, p = 1, sink-free input)")
        } else {
            format!("not bitwise identical: {failures:?}")
        },
    )
}

fn monotonicity() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sink_violations = 0;
    for _ in 0..MONOTONE_CASES {
        let s = rng.random_range(1..=12);
        let d = 16;
        let emb: Vec<f64> = (0..s * d).map(|_| rng.random_range(-1.0..1.0) * 120.0).collect();
        let roles = (0..s).map(|i| if i < s / 2 + 1 { TokenRole::Image } else { TokenRole::Question }).collect();
        let ctx = TokenContext::new(emb, d, 0..s / 2 + 1, roles).unwrap();
        let dims = vec![rng.random_range(0..d), rng.random_range(0..d)];
        let mode = if rng.random_bool(0.5) { NormMode::MonitoredMax } else { NormMode::FullNorm };
        let t1 = rng.random_range(0.1..40.0);
        let t2 = t1 + rng.random_range(0.0..20.0);
        let a = detect_sinks(&ctx, &SinkCriterion::new(dims.clone(), t1, d, mode).unwrap()).unwrap();
        let b = detect_sinks(&ctx, &SinkCriterion::new(dims, t2, d, mode).unwrap()).unwrap();
        if !b.all().is_subset(a.all()) {
            sink_violations += 1;
        }
    }

    let mut head_violations = 0;
    for _ in 0..MONOTONE_CASES {
        let (h, s) = (rng.random_range(1..=4), rng.random_range(1..=10));
        let delta: Vec<f64> = (0..h * s).map(|_| rng.random_range(0.0..1.0)).collect();
        let xi: Vec<f64> = (0..h * s).map(|_| rng.random_range(0.0..0.05)).collect();
        let scores = HeadScores::from_raw(h, s, delta, xi, 1e-6).unwrap();
        let (rho1, alpha1) = (rng.random_range(0.0..1.0), rng.random_range(0.0..0.05));
        let rho2 = rng.random_range(rho1..=1.0);
        let alpha2 = rng.random_range(alpha1..=0.05);
        for dirs in [Directions::image_focused(), Directions::literal()] {
            let base = select_visual_heads(&scores, rho1, alpha1, dirs);
            let moved_rho = select_visual_heads(&scores, rho2, alpha1, dirs);
            let moved_alpha = select_visual_heads(&scores, rho1, alpha2, dirs);
            let subset = |a: &HeadSelection, b: &HeadSelection| a.pairs().iter().all(|&(x, y)| b.contains(x, y));
            let rho_ok = match dirs.relevance {
                Comparison::AtLeast => subset(&moved_rho, &base),
                Comparison::AtMost => subset(&base, &moved_rho),
            };
            let alpha_ok = match dirs.sink_likelihood {
                Comparison::AtMost => subset(&base, &moved_alpha),
                Comparison::AtLeast => subset(&moved_alpha, &base),
            };
            if !(rho_ok && alpha_ok) {
                head_violations += 1;
            }
        }
    }
    vec![
        outcome(
            "monotonicity: sinks shrink as tau grows",
            sink_violations == 0,
            format!("{MONOTONE_CASES} cases, {sink_violations} violations"),
        ),
        outcome(
            "monotonicity: selection follows thresholds",
            head_violations == 0,
            format!("{MONOTONE_CASES} cases x 2 direction settings, {head_violations} violations"),
        ),
    ]
}

fn headline_metrics() -> Outcome {
    let s = BenchSummary::from_accuracies(63.25, 24.71, 43.28);
    let reduction = 100.0 * s.relative_reduction.unwrap_or(f64::NAN);
    let ok = (reduction - HEADLINE_REDUCTION.0).abs() <= HEADLINE_REDUCTION.1
        && (s.accuracy_gain - HEADLINE_GAIN.0).abs() <= HEADLINE_GAIN.1;
    outcome(
        "metrics arithmetic",
        ok,
        format!(
            "misguidance {:.2}% -> {:.2}%, reduction {reduction:.2}% (want {} +/- {}), gain {:.2} (want {} +/- {})",
            100.0 * s.misguidance_base.unwrap_or(f64::NAN),
            100.0 * s.misguidance_eraser.unwrap_or(f64::NAN),
            HEADLINE_REDUCTION.0,
            HEADLINE_REDUCTION.1,
            s.accuracy_gain,
            HEADLINE_GAIN.0,
            HEADLINE_GAIN.1
        ),
    )
}

fn synthetic_benchmark() -> Vec<Outcome> {
    let started = Instant::now();
    let run = RunConfig {
        n: BENCH_N,
        seed: BENCH_SEED,
        ..Default::default()
    };
    let harness = Harness::prepare(&run).unwrap();
    let default = run.intervention.clone();
    let episodes = harness.evaluate(&default).unwrap();
    let summary = sinkshift::summarize(&episodes).unwrap();
    let flipped = episodes.iter().filter(|e| e.correct_before() && !e.correct_after_base()).count();
    let initially = episodes.iter().filter(|e| e.correct_before()).count();
    let mis = summary.misguidance_base.unwrap_or(0.0);
    let red = summary.relative_reduction.unwrap_or(f64::NEG_INFINITY);

    let acc = |f: &dyn Fn(&mut InterventionConfig)| {
        let mut c = default.clone();
        f(&mut c);
        harness.summary(&c).unwrap().acc_after_eraser
    };
    let src = |text, image| {
        acc(&move |c: &mut InterventionConfig| c.sources = SourceToggles { use_text_sinks: text, use_image_sinks: image })
    };
    let (none, image_only, text_only, both) = (src(false, false), src(false, true), src(true, false), src(true, true));
    let comp = |heads, tokens| {
        acc(&move |c: &mut InterventionConfig| {
            c.head_selection = heads;
            c.token_selection = tokens;
        })
    };
    let (c00, c01, c10, c11) = (comp(false, false), comp(false, true), comp(true, false), comp(true, true));

    let l = run.model.layers;
    let sweep: Vec<(usize, f64)> = [0, l / 4, l / 2, 3 * l / 4, l]
        .into_iter()
        .map(|k| (k, acc(&move |c: &mut InterventionConfig| c.layers = LayerRange::front(k))))
        .collect();
    let best = sweep.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let half = sweep.iter().find(|p| p.0 == l / 2).map_or(f64::NAN, |p| p.1);
    let elapsed = started.elapsed();

    vec![
        outcome(
            "benchmark (a): base misguidance",
            mis >= MIN_BASE_MISGUIDANCE,
            format!(
                "acc before {:.1}, after {:.1}; misguidance {:.1}% (min {:.0}%); {flipped}/{initially} initially-correct answers flipped",
                summary.acc_before,
                summary.acc_after_base,
                100.0 * mis,
                100.0 * MIN_BASE_MISGUIDANCE
            ),
        ),
        outcome(
            "benchmark (b): intervention recovers accuracy",
            summary.acc_after_eraser > summary.acc_after_base && red >= MIN_REDUCTION,
            format!(
                "after {:.1} -> {:.1} with intervention; relative reduction {:.1}% (min {:.0}%)",
                summary.acc_after_base,
                summary.acc_after_eraser,
                100.0 * red,
                100.0 * MIN_REDUCTION
            ),
        ),
        outcome(
            "benchmark (c): source ablation ordering",
            text_only >= image_only && both >= image_only && image_only >= none,
            format!("none {none:.1}, image-only {image_only:.1}, text-only {text_only:.1}, both {both:.1}"),
        ),
        outcome(
            "benchmark (c): both components best",
            c11 >= c00 && c11 >= c01 && c11 >= c10,
            format!("heads off/tokens off {c00:.1}, off/on {c01:.1}, on/off {c10:.1}, on/on {c11:.1}"),
        ),
        outcome(
            "benchmark (d): front-half layers near optimum",
            half >= best - SWEEP_SLACK_POINTS,
            format!(
                "{}; front half {half:.1}, best {best:.1} (slack {SWEEP_SLACK_POINTS})",
                sweep.iter().map(|(k, a)| format!("0:{k} {a:.1}")).collect::<Vec<_>>().join(", ")
            ),
        ),
        outcome(
            "benchmark runtime",
            elapsed < BENCH_BUDGET,
            format!("{:.1}s (budget {}s)", elapsed.as_secs_f64(), BENCH_BUDGET.as_secs()),
        ),
    ]
}

fn trace_round_trip() -> Outcome {
    let run = RunConfig::default();
    let trace = capture_trace(&run, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sample0.trace");
    write_trace(&path, &trace).unwrap();
    let back = read_trace(&path).unwrap();

    let cfg = InterventionConfig::default();
    let criterion = cfg.criterion(trace.hidden).unwrap();
    let mut max_raw: f64 = 0.0;
    let mut max_after: f64 = 0.0;
    for l in 0..trace.layers() {
        for (a, b) in trace.attention[l].weights().iter().zip(back.attention[l].weights()) {
            max_raw = max_raw.max((a - b).abs());
        }
        let mem = intervene_layer(&trace.attention[l], &trace.context(l).unwrap(), &criterion, &cfg).unwrap();
        let disk = intervene_layer(&back.attention[l], &back.context(l).unwrap(), &criterion, &cfg).unwrap();
        for (a, b) in mem.tensor.weights().iter().zip(disk.tensor.weights()) {
            max_after = max_after.max((a - b).abs());
        }
    }
    outcome(
        "trace round trip",
        max_raw <= TRACE_TOLERANCE && max_after <= TRACE_TOLERANCE,
        format!(
            "{} layers, S = {}; max |diff| raw {max_raw:.2e}, after pipeline {max_after:.2e} (tol {TRACE_TOLERANCE:.0e})",
            trace.layers(),
            trace.seq_len()
        ),
    )
}

fn main() -> ExitCode {
    let mut all = oracle_and_mass();
    all.push(worked_example());
    all.push(identity_suite());
    all.extend(monotonicity());
    all.push(headline_metrics());
    all.extend(synthetic_benchmark());
    all.push(trace_round_trip());

    println!();
    for o in &all {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = all.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed\n", all.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
