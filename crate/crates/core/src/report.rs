// SPDX-License-Identifier: MIT OR Apache-2.0

//! The trace JSON document shared by the HTTP service, the CLI and the C ABI.
//!
//! Every surface goes through [`render_trace`] so identical inputs produce
//! identical bytes. `elapsed_ms` is the only wall-clock field.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::PatchGrid;
use crate::labels::Labels;
use crate::lens::{top_k, LensError, LensTrajectory};
use crate::model::{CaptureFlags, InferenceTrace};
use crate::tensor::Matrix;
use crate::weights::ModelConfig;

/// How much of the trace to put on the wire.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureMode {
    /// Predictions and logit lens only.
    None,
    #[default]
    Attention,
    /// Adds scores, Q/K/V, hidden states and the full logit-lens matrix.
    Full,
}

impl CaptureMode {
    pub fn flags(self) -> CaptureFlags {
        match self {
            CaptureMode::None | CaptureMode::Attention => CaptureFlags::attention_only(),
            CaptureMode::Full => CaptureFlags::full(),
        }
    }
}

impl fmt::Display for CaptureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptureMode::None => "none",
            CaptureMode::Attention => "attention",
            CaptureMode::Full => "full",
        })
    }
}

impl FromStr for CaptureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(CaptureMode::None),
            "attention" => Ok(CaptureMode::Attention),
            "full" => Ok(CaptureMode::Full),
            other => Err(format!("capture must be none, attention or full, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOptions {
    pub capture: CaptureMode,
    pub top_k: usize,
    pub tracked_classes: Vec<usize>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            capture: CaptureMode::Attention,
            top_k: 5,
            tracked_classes: Vec::new(),
        }
    }
}

/// Content-derived identifier: the same upload with the same options always
/// maps to the same id.
pub fn trace_id(image_bytes: &[u8], opts: &TraceOptions) -> String {
    let mut h = Sha256::new();
    h.update(image_bytes);
    h.update(format!("|{}|{}|{:?}", opts.capture, opts.top_k, opts.tracked_classes).as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// The `/api/v1/config` view of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigView {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub grid_side: usize,
    pub num_classes: usize,
    pub token_count: usize,
}

impl From<&ModelConfig> for ConfigView {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            hidden_dim: c.hidden_dim,
            patch_size: c.patch_size,
            image_side: c.image_side,
            grid_side: c.grid_side,
            num_classes: c.num_classes,
            token_count: c.token_count(),
        }
    }
}

#[derive(Debug, Serialize)]
struct TopEntry<'a> {
    class_index: usize,
    label: &'a str,
    logit: f32,
    probability: f32,
}

#[derive(Debug, Serialize)]
struct QkvView<'a> {
    q: Vec<Vec<Vec<&'a [f32]>>>,
    k: Vec<Vec<Vec<&'a [f32]>>>,
    v: Vec<Vec<Vec<&'a [f32]>>>,
}

#[derive(Debug, Serialize)]
struct TraceDocument<'a> {
    trace_id: &'a str,
    predicted_class: usize,
    class_label: &'a str,
    topk: Vec<TopEntry<'a>>,
    probabilities_topk: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<Vec<Vec<&'a [f32]>>>>,
    logit_lens_classes: Vec<usize>,
    logit_lens: Vec<Vec<f32>>,
    logit_lens_probabilities: Vec<Vec<f32>>,
    cls_norms: Vec<f32>,
    patch_grid: PatchGrid,
    config: ConfigView,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits: Option<&'a [f32]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probabilities: Option<&'a [f32]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cls_per_layer: Option<Vec<&'a [f32]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens_embedded: Option<Vec<&'a [f32]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<Vec<Vec<&'a [f32]>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qkv: Option<QkvView<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_states: Option<Vec<Vec<&'a [f32]>>>,
    elapsed_ms: f64,
}

fn rows(m: &Matrix) -> Vec<&[f32]> {
    m.iter_rows().collect()
}

fn stack(ms: &[Matrix]) -> Vec<Vec<&[f32]>> {
    ms.iter().map(rows).collect()
}

fn pick(m: &Matrix, classes: &[usize]) -> Vec<Vec<f32>> {
    m.iter_rows()
        .map(|r| classes.iter().map(|&c| r[c]).collect())
        .collect()
}

/// Serializes a trace to the wire format.
pub fn render_trace(
    trace: &InferenceTrace,
    trace_id: &str,
    labels: &Labels,
    opts: &TraceOptions,
) -> Result<String, LensError> {
    let full = opts.capture == CaptureMode::Full;
    let ranked = top_k(&trace.final_logits, opts.top_k)?;
    let trajectory = LensTrajectory::from_trace(trace, opts.top_k, opts.tracked_classes.iter().copied())?;
    let classes: Vec<usize> = if full {
        (0..trace.config.num_classes).collect()
    } else {
        trajectory.chart_classes()
    };

    let doc = TraceDocument {
        trace_id,
        predicted_class: trace.predicted_class,
        class_label: labels.label(trace.predicted_class),
        topk: ranked
            .iter()
            .map(|r| TopEntry {
                class_index: r.class_index,
                label: labels.label(r.class_index),
                logit: r.logit,
                probability: r.probability,
            })
            .collect(),
        probabilities_topk: ranked.iter().map(|r| r.probability).collect(),
        attention: (opts.capture != CaptureMode::None)
            .then(|| trace.attention.iter().map(|a| stack(&a.weights)).collect()),
        logit_lens: pick(&trajectory.per_layer_logits, &classes),
        logit_lens_probabilities: pick(&trajectory.per_layer_probabilities, &classes),
        logit_lens_classes: classes,
        cls_norms: trace.cls_norms(),
        patch_grid: trace.patch_grid,
        config: ConfigView::from(&trace.config),
        logits: full.then_some(trace.final_logits.as_slice()),
        probabilities: full.then_some(trace.probabilities.as_slice()),
        cls_per_layer: full.then(|| rows(&trace.cls_per_layer)),
        tokens_embedded: full.then(|| rows(&trace.tokens_embedded)),
        scores: trace
            .attention
            .iter()
            .map(|a| a.scores.as_deref().map(stack))
            .collect::<Option<Vec<_>>>()
            .filter(|_| full),
        qkv: trace
            .attention
            .iter()
            .map(|a| a.qkv.as_ref())
            .collect::<Option<Vec<_>>>()
            .filter(|_| full)
            .map(|caps| QkvView {
                q: caps.iter().map(|c| stack(&c.q)).collect(),
                k: caps.iter().map(|c| stack(&c.k)).collect(),
                v: caps.iter().map(|c| stack(&c.v)).collect(),
            }),
        hidden_states: trace
            .hidden_states
            .as_ref()
            .filter(|_| full)
            .map(|hs| stack(hs)),
        elapsed_ms: trace.elapsed_ms,
    };
    Ok(serde_json::to_string(&doc).expect("trace values are finite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_mode_round_trips_through_text() {
        for mode in [CaptureMode::None, CaptureMode::Attention, CaptureMode::Full] {
            assert_eq!(mode.to_string().parse::<CaptureMode>().unwrap(), mode);
        }
        assert!("everything".parse::<CaptureMode>().is_err());
    }

    #[test]
    fn trace_id_depends_on_bytes_and_options() {
        let opts = TraceOptions::default();
        let a = trace_id(b"abc", &opts);
        assert_eq!(a, trace_id(b"abc", &opts));
        assert_eq!(a.len(), 16);
        assert_ne!(a, trace_id(b"abd", &opts));
        let full = TraceOptions {
            capture: CaptureMode::Full,
            ..TraceOptions::default()
        };
        assert_ne!(a, trace_id(b"abc", &full));
    }
}
