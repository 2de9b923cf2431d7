// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Directions, DEFAULT_EPSILON};
use crate::sink::{NormMode, SinkCriterion};

/// Hidden dimensions carrying sink spikes in the toy model.
pub const TOY_MONITORED_DIMS: [usize; 2] = [211, 247];

/// Half-open layer interval, written `start:end` in config files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn empty() -> Self {
        Self { start: 0, end: 0 }
    }

    pub const fn front(k: usize) -> Self {
        Self { start: 0, end: k }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.start <= layer && layer < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn as_range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("layer range {s:?} must look like START:END"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().parse().map_err(|_| bad())?;
        if end < start {
            return Err(Error::InvalidConfig(format!("layer range {s:?} ends before it starts")));
        }
        Ok(Self { start, end })
    }
}

impl TryFrom<String> for LayerRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerRange> for String {
    fn from(r: LayerRange) -> Self {
        r.to_string()
    }
}

/// Which detected sinks feed the reallocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceToggles {
    /// Scale text sinks by `p` and harvest the budget.
    pub use_text_sinks: bool,
    /// Zero visual-sink columns.
    pub use_image_sinks: bool,
}

impl Default for SourceToggles {
    fn default() -> Self {
        Self {
            use_text_sinks: true,
            use_image_sinks: true,
        }
    }
}

/// Published hyperparameter sets for the three reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LlavaV15,
    LlavaV16,
    InternVl2,
}

impl Preset {
    pub fn alpha(self) -> f64 {
        match self {
            Self::LlavaV15 => 0.005,
            Self::LlavaV16 => 0.01,
            Self::InternVl2 => 0.1,
        }
    }

    /// Sink dimensions of the model's hidden states, for imported traces.
    pub fn monitored_dims(self) -> Vec<usize> {
        match self {
            Self::LlavaV15 | Self::LlavaV16 => vec![1415, 2533],
            Self::InternVl2 => vec![2624, 3584],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llava-v1.5" | "llava-v15" => Ok(Self::LlavaV15),
            "llava-v1.6" | "llava-v16" => Ok(Self::LlavaV16),
            "internvl2" | "intern-vl2" => Ok(Self::InternVl2),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected llava-v1.5, llava-v1.6 or internvl2)"
            ))),
        }
    }
}

/// Every knob of the detect, score, select and reallocate pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    /// Sink threshold on the normalized hidden-state magnitude.
    pub tau: f64,
    /// Image-relevance threshold.
    pub rho: f64,
    /// Sink-likelihood threshold.
    pub alpha: f64,
    /// Fraction of text-sink attention that stays in place.
    pub p: f64,
    pub monitored_dims: Vec<usize>,
    pub norm_mode: NormMode,
    pub epsilon: f64,
    pub layers: LayerRange,
    pub directions: Directions,
    pub sources: SourceToggles,
    /// Rescale every modified row back to unit mass.
    pub renormalize_rows: bool,
    /// When off, every `(head, source)` row is treated as selected.
    pub head_selection: bool,
    /// When off, every non-image token is treated as a text sink.
    pub token_selection: bool,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            rho: 0.6,
            alpha: Preset::LlavaV15.alpha(),
            p: 0.6,
            monitored_dims: TOY_MONITORED_DIMS.to_vec(),
            norm_mode: NormMode::MonitoredMax,
            epsilon: DEFAULT_EPSILON,
            layers: LayerRange::front(4),
            directions: Directions::default(),
            sources: SourceToggles::default(),
            renormalize_rows: false,
            head_selection: true,
            token_selection: true,
        }
    }
}

impl InterventionConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.alpha = preset.alpha();
        self
    }

    /// Checks the scalar knobs. Layer bounds are checked against a model by
    /// [`InterventionConfig::validate_for_layers`].
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be positive (got {})", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1] (got {})", self.rho)));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0 (got {})", self.alpha)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidP(self.p));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive (got {})",
                self.epsilon
            )));
        }
        if self.monitored_dims.is_empty() {
            return Err(Error::InvalidConfig("monitored_dims must list at least one dimension".into()));
        }
        Ok(())
    }

    pub fn validate_for_layers(&self, layers: usize) -> Result<()> {
        self.validate()?;
        if !self.layers.is_empty() && self.layers.end > layers {
            return Err(Error::InvalidConfig(format!(
                "layer range {} exceeds the {layers}-layer stack",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn criterion(&self, hidden: usize) -> Result<SinkCriterion> {
        SinkCriterion::new(self.monitored_dims.clone(), self.tau, hidden, self.norm_mode)
    }

    pub fn realloc_params(&self) -> crate::realloc::ReallocParams {
        crate::realloc::ReallocParams {
            p: self.p,
            sources: self.sources,
            renormalize_rows: self.renormalize_rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = InterventionConfig::default();
        assert_eq!((c.tau, c.rho, c.alpha, c.p), (20.0, 0.6, 0.005, 0.6));
        assert_eq!(c.epsilon, 1e-6);
        assert_eq!(c.layers, LayerRange::new(0, 4));
        c.validate_for_layers(8).unwrap();
        assert!(c.validate_for_layers(3).is_err());
        assert_eq!(c.clone().with_preset(Preset::LlavaV16).alpha, 0.01);
        assert_eq!(c.with_preset(Preset::InternVl2).alpha, 0.1);
    }

    #[test]
    fn layer_range_parses() {
        assert_eq!("0:16".parse::<LayerRange>().unwrap(), LayerRange::new(0, 16));
        assert!("0:0".parse::<LayerRange>().unwrap().is_empty());
        assert!("4:2".parse::<LayerRange>().is_err());
        assert!("3".parse::<LayerRange>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = InterventionConfig {
            directions: Directions::literal(),
            ..Default::default()
        };
        c.sources.use_image_sinks = false;
        c.renormalize_rows = true;
        c.norm_mode = NormMode::FullNorm;
        c.layers = LayerRange::new(2, 6);
        let text = toml::to_string(&c).unwrap();
        let back: InterventionConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_p_rejected() {
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            let c = InterventionConfig { p, ..Default::default() };
            assert!(matches!(c.validate(), Err(Error::InvalidP(_))));
        }
        let c = InterventionConfig { p: 1.0, ..Default::default() };
        c.validate().unwrap();
    }
}
