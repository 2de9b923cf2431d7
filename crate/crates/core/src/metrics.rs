// SPDX-License-Identifier: MIT OR Apache-2.0

//! Accuracy and misguidance summaries.

use serde::{Deserialize, Serialize};

use crate::bench::EpisodeResult;
use crate::error::{Error, Result};

/// Share of round-one accuracy lost in round two. `None` when nothing was
/// right to begin with.
pub fn misguidance(acc_before: f64, acc_after: f64) -> Option<f64> {
    (acc_before > 0.0).then(|| (acc_before - acc_after) / acc_before)
}

/// How much of the baseline misguidance the intervention removes.
pub fn relative_reduction(base: f64, eraser: f64) -> Option<f64> {
    (base != 0.0).then(|| (base - eraser) / base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub episodes: usize,
    /// Accuracies in percent.
    pub acc_before: f64,
    pub acc_after_base: f64,
    pub acc_after_eraser: f64,
    /// Fractions, not percent.
    pub misguidance_base: Option<f64>,
    pub misguidance_eraser: Option<f64>,
    pub relative_reduction: Option<f64>,
    /// Round-two accuracy gained by intervening, in points.
    pub accuracy_gain: f64,
}

impl BenchSummary {
    /// Builds a summary from three accuracies in percent.
    pub fn from_accuracies(acc_before: f64, acc_after_base: f64, acc_after_eraser: f64) -> Self {
        let misguidance_base = misguidance(acc_before, acc_after_base);
        let misguidance_eraser = misguidance(acc_before, acc_after_eraser);
        let relative_reduction = match (misguidance_base, misguidance_eraser) {
            (Some(b), Some(e)) => relative_reduction(b, e),
            _ => None,
        };
        Self {
            episodes: 0,
            acc_before,
            acc_after_base,
            acc_after_eraser,
            misguidance_base,
            misguidance_eraser,
            relative_reduction,
            accuracy_gain: acc_after_eraser - acc_after_base,
        }
    }
}

pub fn summarize(episodes: &[EpisodeResult]) -> Result<BenchSummary> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("episodes"));
    }
    let n = episodes.len() as f64;
    let pct = |f: fn(&EpisodeResult) -> bool| 100.0 * episodes.iter().filter(|e| f(e)).count() as f64 / n;
    let mut s = BenchSummary::from_accuracies(
        pct(EpisodeResult::correct_before),
        pct(EpisodeResult::correct_after_base),
        pct(EpisodeResult::correct_after_eraser),
    );
    s.episodes = episodes.len();
    Ok(s)
}
