// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scans model seeds under one generator setting and prints base
//! misguidance and the reduction achieved with the default intervention.
//!
//! ```text
//! cargo run --release -p sinkshift --example calibrate -- [generator.toml]
//! ```
//!
//! The optional file holds `GenParams` keys, e.g. `gaslight_content = 6.0`.

use sinkshift::harness::Harness;
use sinkshift::{GenParams, ModelParams, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let generator: GenParams = match std::env::args().nth(1) {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
        None => GenParams::default(),
    };
    for seed in 1..=8 {
        let run = RunConfig {
            model: ModelParams { seed, ..Default::default() },
            generator: generator.clone(),
            ..Default::default()
        };
        let s = Harness::prepare(&run)?.summary(&run.intervention)?;
        println!(
            "model seed {seed}: acc {:.1} / {:.1} / {:.1}  misguidance {:.3}  reduction {:.3}",
            s.acc_before,
            s.acc_after_base,
            s.acc_after_eraser,
            s.misguidance_base.unwrap_or(f64::NAN),
            s.relative_reduction.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
