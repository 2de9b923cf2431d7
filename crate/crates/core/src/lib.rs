// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-sink detection and attention reallocation for multimodal
//! transformers, plus a seeded toy model and benchmark to exercise it.
//!
//! The pipeline for one layer is: find sink tokens from hidden-state
//! magnitudes ([`sink`]), score every `(head, source)` row for image
//! relevance and sink likelihood ([`heads`]), then move attention off
//! sinks and onto the non-sink image profile for the selected rows
//! ([`realloc`]).

pub mod bench;
pub mod config;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod realloc;
pub mod sink;
pub mod tensor;
pub mod trace;

pub use bench::{generate_benchmark, run_episode, EpisodeResult, GaslightSample, GenParams};
pub use config::{InterventionConfig, LayerRange, Preset, SourceToggles};
pub use error::{Error, Result};
pub use heads::{score_heads, select_visual_heads, Comparison, Directions, HeadScores, HeadSelection};
pub use metrics::{summarize, BenchSummary};
pub use model::{ForwardOutput, ModelParams, ToyModel};
pub use realloc::{
    apply_to_layer_stack, intervene_layer, reallocate, ReallocParams, ReallocReport, RowReport, RowStatus,
};
pub use sink::{detect_sinks, token_scores, NormMode, SinkCriterion, SinkPartition};
pub use harness::RunConfig;
pub use tensor::{AttentionTensor, IndexSet, TokenContext, TokenRole};
pub use trace::{read_trace, write_trace, Trace, TraceMeta};
