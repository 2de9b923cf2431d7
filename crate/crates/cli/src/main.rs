// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sinkshift::harness::{
    cmd_ablate_components, cmd_ablate_sources, cmd_analyze_trace, cmd_bench, cmd_export_trace, cmd_layer_sweep,
    to_json, AblationRow,
};
use sinkshift::{BenchSummary, Directions, LayerRange, NormMode, Preset, RunConfig};

/// Sink-aware attention reallocation: benchmark, ablations and trace tools.
#[derive(Debug, Parser)]
#[command(name = "sinkshift", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gaslighting benchmark with and without intervention.
    Bench {
        /// Write episodes.csv, summary.json and config.toml here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toggle text-sink and image-sink sources.
    AblateSources,
    /// Toggle head selection and token selection.
    AblateComponents,
    /// Accuracy for front-k layer ranges.
    LayerSweep {
        /// Every k from 0 to L instead of quarters.
        #[arg(long)]
        fine: bool,
    },
    /// Run the pipeline on a stored trace and report per layer.
    AnalyzeTrace {
        path: PathBuf,
        /// Use the configured monitored dims instead of the trace's own.
        #[arg(long)]
        config_dims: bool,
    },
    /// Dump hidden states and attention of one benchmark sample.
    ExportTrace {
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective run configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Threshold preset: llava-v1.5, llava-v1.6 or internvl2.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Benchmark size.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Benchmark generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    model_seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    spike_score: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    p: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Comma-separated hidden dimensions to monitor for sinks.
    #[arg(long, global = true, value_delimiter = ',')]
    monitored_dims: Option<Vec<usize>>,
    /// monitored-max or full-norm.
    #[arg(long, global = true, value_parser = parse_norm_mode)]
    norm_mode: Option<NormMode>,
    /// Half-open layer range START:END.
    #[arg(long, global = true)]
    layers: Option<LayerRange>,
    /// Select rows with low relevance and high sink likelihood instead.
    #[arg(long, global = true)]
    literal_directions: bool,
    #[arg(long, global = true)]
    no_text_sinks: bool,
    #[arg(long, global = true)]
    no_image_sinks: bool,
    #[arg(long, global = true)]
    renormalize_rows: bool,
    #[arg(long, global = true)]
    no_head_selection: bool,
    #[arg(long, global = true)]
    no_token_selection: bool,
}

fn parse_norm_mode(s: &str) -> Result<NormMode, String> {
    match s {
        "monitored-max" => Ok(NormMode::MonitoredMax),
        "full-norm" => Ok(NormMode::FullNorm),
        other => Err(format!("unknown norm mode {other:?} (expected monitored-max or full-norm)")),
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(preset) = self.preset {
            c.intervention = c.intervention.with_preset(preset);
        }
        let iv = &mut c.intervention;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { $dst = v; })*
            };
        }
        set!(
            tau => iv.tau,
            rho => iv.rho,
            alpha => iv.alpha,
            p => iv.p,
            epsilon => iv.epsilon,
            monitored_dims => iv.monitored_dims,
            norm_mode => iv.norm_mode,
            layers => iv.layers,
        );
        if self.literal_directions {
            iv.directions = Directions::literal();
        }
        iv.sources.use_text_sinks &= !self.no_text_sinks;
        iv.sources.use_image_sinks &= !self.no_image_sinks;
        iv.renormalize_rows |= self.renormalize_rows;
        iv.head_selection &= !self.no_head_selection;
        iv.token_selection &= !self.no_token_selection;
        set!(
            n => c.n,
            seed => c.seed,
            model_seed => c.model.seed,
            workers => c.workers,
            spike_score => c.generator.spike_score,
        );
        c.validate().context("invalid configuration")?;
        Ok(c)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}%", 100.0 * x))
}

fn print_summary(s: &BenchSummary) {
    println!("episodes               {}", s.episodes);
    println!("accuracy before        {:.1}", s.acc_before);
    println!("accuracy after (base)  {:.1}", s.acc_after_base);
    println!("accuracy after (fix)   {:.1}", s.acc_after_eraser);
    println!("misguidance base       {}", pct(s.misguidance_base));
    println!("misguidance fixed      {}", pct(s.misguidance_eraser));
    println!("relative reduction     {}", pct(s.relative_reduction));
    println!("accuracy gain          {:+.1}", s.accuracy_gain);
}

fn print_ablation(rows: &[AblationRow], first: &str, second: &str) {
    if let Some(r) = rows.first() {
        println!("selection rule: {}", r.directions);
    }
    println!("{first:>6} {second:>6} {:>8} {:>11}", "acc", "misguid.");
    for r in rows {
        let onoff = |b: bool| if b { "on" } else { "off" };
        println!(
            "{:>6} {:>6} {:>8.1} {:>11}",
            onoff(r.first),
            onoff(r.second),
            r.accuracy(),
            pct(r.summary.misguidance_eraser)
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.overrides.resolve()?;
    match cli.command {
        Command::Bench { out } => {
            let result = cmd_bench(&config, out.as_deref())?;
            if cli.json {
                println!("{}", to_json(&result.summary));
            } else {
                print_summary(&result.summary);
                if let Some(dir) = out {
                    println!("wrote {}", dir.display());
                }
            }
        }
        Command::AblateSources => {
            let rows = cmd_ablate_sources(&config)?;
            if cli.json {
                println!("{}", to_json(&rows));
            } else {
                print_ablation(&rows, "text", "image");
            }
        }
        Command::AblateComponents => {
            let rows = cmd_ablate_components(&config)?;
            if cli.json {
                println!("{}", to_json(&rows));
            } else {
                print_ablation(&rows, "heads", "tokens");
            }
        }
        Command::LayerSweep { fine } => {
            let points = cmd_layer_sweep(&config, fine)?;
            if cli.json {
                println!("{}", to_json(&points));
            } else {
                println!("{:>7} {:>8}", "layers", "acc");
                for pt in &points {
                    println!("{:>7} {:>8.1}", pt.layers.to_string(), pt.summary.acc_after_eraser);
                }
            }
        }
        Command::AnalyzeTrace { path, config_dims } => {
            let report = cmd_analyze_trace(&path, &config.intervention, !config_dims)
                .with_context(|| format!("analyzing {}", path.display()))?;
            if cli.json {
                println!("{}", to_json(&report));
            } else {
                println!(
                    "{}: {} layers, {} heads, {} tokens",
                    report.model, report.layers, report.heads, report.seq_len
                );
                println!(
                    "{:>5} {:>5} {:>12} {:>12} {:>8} {:>8} {:>9} {:>9}",
                    "layer", "range", "visual", "text", "rows", "skipped", "budget", "mean xi"
                );
                for l in &report.per_layer {
                    println!(
                        "{:>5} {:>5} {:>12} {:>12} {:>8} {:>8} {:>9.3} {:>9.4}",
                        l.layer,
                        if l.in_range { "yes" } else { "-" },
                        format!("{:?}", l.visual_sinks),
                        format!("{:?}", l.text_sinks),
                        l.modified_rows,
                        l.skipped_rows,
                        l.total_budget,
                        l.mean_xi
                    );
                }
            }
        }
        Command::ExportTrace { sample, out } => {
            let trace = cmd_export_trace(&config, sample, &out)?;
            println!(
                "wrote {} ({} layers, S = {}, d = {})",
                out.display(),
                trace.layers(),
                trace.seq_len(),
                trace.hidden
            );
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}
