// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary dump of one sequence's hidden states and attention maps.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic  b"SNKTRACE"
//!      8     4  version (u32, currently 1)
//!     12     4  flags (u32, must be 0)
//!     16     4  L  layers
//!     20     4  H  heads
//!     24     4  S  sequence length
//!     28     4  d  hidden size
//!     32     4  image_start
//!     36     4  image_end (exclusive)
//!     40     .  per layer: hidden states [S * d] f32, then attention [H * S * S] f32
//! ```
//!
//! A TOML sidecar at `<path>.meta` holds the model name, the monitored
//! dimensions and one role per token.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttentionTensor, TokenContext, TokenRole};

pub const MAGIC: [u8; 8] = *b"SNKTRACE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
/// Row-sum tolerance after the f32 round trip.
pub const TRACE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model: String,
    pub monitored_dims: Vec<usize>,
    pub roles: Vec<TokenRole>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub meta: TraceMeta,
    pub hidden: usize,
    pub image_span: Range<usize>,
    /// Hidden state entering each layer, flat `[S * d]`.
    pub hidden_states: Vec<Vec<f64>>,
    pub attention: Vec<AttentionTensor>,
}

impl Trace {
    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn heads(&self) -> usize {
        self.attention.first().map_or(0, |t| t.heads())
    }

    pub fn seq_len(&self) -> usize {
        self.meta.roles.len()
    }

    /// Token context for the hidden state entering `layer`.
    pub fn context(&self, layer: usize) -> Result<TokenContext> {
        let states = self.hidden_states.get(layer).ok_or(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            len: self.hidden_states.len(),
        })?;
        TokenContext::new(states.clone(), self.hidden, self.image_span.clone(), self.meta.roles.clone())
    }

    fn validate(&self) -> Result<()> {
        let l = self.attention.len();
        if l == 0 {
            return Err(Error::EmptyInput("trace layers"));
        }
        if self.hidden_states.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "{} hidden-state layers for {l} attention layers",
                self.hidden_states.len()
            )));
        }
        let (h, s) = (self.attention[0].heads(), self.seq_len());
        for t in &self.attention {
            if t.heads() != h || t.seq_len() != s {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} attention is {}x{s}x{s}, expected {h}x{s}x{s}",
                    t.layer_index(),
                    t.heads()
                )));
            }
        }
        for states in &self.hidden_states {
            if states.len() != s * self.hidden {
                return Err(Error::ShapeMismatch(format!(
                    "hidden states hold {} values, expected {}",
                    states.len(),
                    s * self.hidden
                )));
            }
        }
        // Reuses the context checks on span and roles.
        self.context(0).map(|_| ())
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::ShapeMismatch(format!("{what} = {value} does not fit in u32")))
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    trace.validate()?;
    let (s, d) = (trace.seq_len(), trace.hidden);
    let header = [
        to_u32(VERSION as usize, "version")?,
        0,
        to_u32(trace.layers(), "layers")?,
        to_u32(trace.heads(), "heads")?,
        to_u32(s, "sequence length")?,
        to_u32(d, "hidden size")?,
        to_u32(trace.image_span.start, "image start")?,
        to_u32(trace.image_span.end, "image end")?,
    ];
    write_atomic(path, |w| {
        w.write_all(&MAGIC)?;
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for (states, attn) in trace.hidden_states.iter().zip(&trace.attention) {
            for v in states.iter().chain(attn.weights()) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    })?;
    let meta = toml::to_string(&trace.meta).map_err(|e| Error::Metadata {
        path: meta_path(path),
        message: e.to_string(),
    })?;
    write_atomic(&meta_path(path), |w| w.write_all(meta.as_bytes()))
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 8] = bytes[..8].try_into().expect("8 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32_at(&bytes, 8) as u32;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let flags = u32_at(&bytes, 12);
    if flags != 0 {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            message: format!("unknown header flags {flags:#x}"),
        });
    }
    let [l, h, s, d, img_start, img_end] = [16, 20, 24, 28, 32, 36].map(|at| u32_at(&bytes, at));
    let per_layer = (s as u64) * (d as u64) + (h as u64) * (s as u64) * (s as u64);
    let expected = HEADER_LEN as u64 + 4 * per_layer * l as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len() as u64,
        });
    }

    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: TraceMeta = toml::from_str(&text).map_err(|e| Error::Metadata {
        path: meta_file.clone(),
        message: e.to_string(),
    })?;
    if meta.roles.len() != s {
        return Err(Error::Metadata {
            path: meta_file,
            message: format!("{} roles for a sequence of {s} tokens", meta.roles.len()),
        });
    }

    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut hidden_states = Vec::with_capacity(l);
    let mut attention = Vec::with_capacity(l);
    for layer in 0..l {
        hidden_states.push(floats.by_ref().take(s * d).collect());
        let weights: Vec<f64> = floats.by_ref().take(h * s * s).collect();
        attention.push(AttentionTensor::with_tolerance(h, s, weights, layer, TRACE_TOLERANCE)?);
    }
    let trace = Trace {
        meta,
        hidden: d,
        image_span: img_start..img_end,
        hidden_states,
        attention,
    };
    trace.validate()?;
    Ok(trace)
}
