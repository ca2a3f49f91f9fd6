// SPDX-License-Identifier: MIT OR Apache-2.0

//! Traced ViT forward pass.
//!
//! Blocks are pre-LN: `u = x + MHA(LN1(x))`, `y = u + MLP(LN2(u))`. Q, K and V
//! are materialized per head so they can be captured alongside the scaled
//! scores and post-softmax weights. The CLS token is row 0 throughout.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{PatchGrid, PatchMatrix};
use crate::lens::compute_logit_lens;
use crate::tensor::{add_rows, gelu_in_place, layer_norm, layer_norm_rows, matmul, softmax, softmax_rows, Matrix, TensorError};
use crate::weights::{LayerWeights, ModelConfig, WeightBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("patch geometry {got:?} does not match the model ({expected:?})")]
    PatchGeometry { expected: PatchGrid, got: PatchGrid },
}

/// Which optional intermediates to keep. Attention weights are always kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureFlags {
    pub scores: bool,
    pub qkv: bool,
    pub hidden_states: bool,
}

impl CaptureFlags {
    pub fn attention_only() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        Self {
            scores: true,
            qkv: true,
            hidden_states: true,
        }
    }
}

/// Per-head query/key/value slices, each `T × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvCapture {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    /// Post-softmax weights, one `T × T` matrix per head.
    pub weights: Vec<Matrix>,
    /// Scaled pre-softmax scores `QKᵀ/√d_h`, per head.
    pub scores: Option<Vec<Matrix>>,
    pub qkv: Option<QkvCapture>,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub config: ModelConfig,
    pub patch_grid: PatchGrid,
    pub tokens_embedded: Matrix,
    /// One record per encoder block.
    pub attention: Vec<AttentionRecord>,
    /// Block outputs (`T × D` each), only with `CaptureFlags::hidden_states`.
    pub hidden_states: Option<Vec<Matrix>>,
    /// Row 0 is the embedded CLS, row `l` the CLS after block `l`.
    pub cls_per_layer: Matrix,
    pub final_logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    /// `(L+1) × C`; the last row is `final_logits`.
    pub logit_lens: Matrix,
    pub predicted_class: usize,
    pub elapsed_ms: f64,
}

/// Projects patches, prepends CLS and adds positional embeddings.
pub fn embed_tokens(patches: &PatchMatrix, w: &WeightBundle) -> Result<Matrix, ModelError> {
    let cfg = &w.config;
    let expected = PatchGrid {
        grid_side: cfg.grid_side,
        patch_size: cfg.patch_size,
    };
    if patches.grid() != expected {
        return Err(ModelError::PatchGeometry {
            expected,
            got: patches.grid(),
        });
    }
    let mut projected = matmul(&patches.vectors, &w.patch_proj)?;
    projected.add_row_vector(&w.patch_bias)?;
    let d = cfg.hidden_dim;
    let mut data = Vec::with_capacity(cfg.token_count() * d);
    data.extend_from_slice(&w.cls_token);
    data.extend_from_slice(projected.data());
    let tokens = Matrix::from_vec(cfg.token_count(), d, data)?;
    Ok(add_rows(&tokens, &w.pos_embed)?)
}

/// Multi-head self-attention on already-normalized input.
pub fn multi_head_attention(
    x: &Matrix,
    layer: &LayerWeights,
    config: &ModelConfig,
    layer_index: usize,
    capture: CaptureFlags,
) -> Result<(Matrix, AttentionRecord), ModelError> {
    let d = config.hidden_dim;
    if x.cols() != d {
        return Err(TensorError::DimensionMismatch {
            left: x.cols(),
            right: d,
            context: "attention input width",
        }
        .into());
    }
    let heads = config.num_heads;
    let dh = config.head_dim();
    let t = x.rows();
    let scale = 1.0 / (d as f32 / heads as f32).sqrt();

    let mut qkv = matmul(x, &layer.w_qkv)?;
    qkv.add_row_vector(&layer.b_qkv)?;

    let mut weights = Vec::with_capacity(heads);
    let mut scores_cap = capture.scores.then(|| Vec::with_capacity(heads));
    let mut qkv_cap = capture.qkv.then(|| QkvCapture {
        q: Vec::with_capacity(heads),
        k: Vec::with_capacity(heads),
        v: Vec::with_capacity(heads),
    });
    let mut concat = Matrix::zeros(t, d);
    for h in 0..heads {
        let q = qkv.column_block(h * dh, dh);
        let k = qkv.column_block(d + h * dh, dh);
        let v = qkv.column_block(2 * d + h * dh, dh);
        let mut scores = matmul(&q, &k.transpose())?;
        for s in scores.data_mut() {
            *s *= scale;
        }
        let attn = softmax_rows(&scores, 1.0)?;
        let out = matmul(&attn, &v)?;
        for r in 0..t {
            concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
        }
        weights.push(attn);
        if let Some(s) = scores_cap.as_mut() {
            s.push(scores);
        }
        if let Some(c) = qkv_cap.as_mut() {
            c.q.push(q);
            c.k.push(k);
            c.v.push(v);
        }
    }
    let mut output = matmul(&concat, &layer.w_out)?;
    output.add_row_vector(&layer.b_out)?;
    Ok((
        output,
        AttentionRecord {
            layer: layer_index,
            weights,
            scores: scores_cap,
            qkv: qkv_cap,
        },
    ))
}

fn mlp(x: &Matrix, layer: &LayerWeights) -> Result<Matrix, TensorError> {
    let mut hidden = matmul(x, &layer.w_mlp1)?;
    hidden.add_row_vector(&layer.b_mlp1)?;
    gelu_in_place(&mut hidden)?;
    let mut out = matmul(&hidden, &layer.w_mlp2)?;
    out.add_row_vector(&layer.b_mlp2)?;
    Ok(out)
}

/// One pre-LN encoder block.
pub fn encoder_block(
    x: &Matrix,
    layer_index: usize,
    w: &WeightBundle,
    capture: CaptureFlags,
) -> Result<(Matrix, AttentionRecord), ModelError> {
    let cfg = &w.config;
    let layer = &w.layers[layer_index];
    let normed = layer_norm_rows(x, &layer.ln1_gamma, &layer.ln1_beta, cfg.ln_eps)?;
    let (attn_out, record) = multi_head_attention(&normed, layer, cfg, layer_index, capture)?;
    let u = add_rows(x, &attn_out)?;
    let normed = layer_norm_rows(&u, &layer.ln2_gamma, &layer.ln2_beta, cfg.ln_eps)?;
    let y = add_rows(&u, &mlp(&normed, layer)?)?;
    Ok((y, record))
}

/// Output of running every encoder block on an embedded token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `L + 1` states: the input followed by each block's output.
    pub states: Vec<Matrix>,
    pub attention: Vec<AttentionRecord>,
}

pub fn encode(tokens: &Matrix, w: &WeightBundle, capture: CaptureFlags) -> Result<EncoderOutput, ModelError> {
    let mut states = Vec::with_capacity(w.config.num_layers + 1);
    let mut attention = Vec::with_capacity(w.config.num_layers);
    states.push(tokens.clone());
    for l in 0..w.config.num_layers {
        let (y, record) = encoder_block(&states[l], l, w, capture)?;
        states.push(y);
        attention.push(record);
    }
    Ok(EncoderOutput { states, attention })
}

/// Final layer norm followed by the linear head. Shared by [`classify`] and
/// the logit lens so the last lens row is bit-identical to the logits.
pub fn head_logits(cls: &[f32], w: &WeightBundle) -> Result<Vec<f32>, TensorError> {
    let normed = layer_norm(cls, &w.final_ln_gamma, &w.final_ln_beta, w.config.ln_eps)?;
    let mut logits = matmul(&Matrix::from_vec(1, normed.len(), normed)?, &w.head_w)?;
    logits.add_row_vector(&w.head_b)?;
    Ok(logits.into_vec())
}

/// Logits and softmax probabilities for one CLS state.
pub fn classify(cls: &[f32], w: &WeightBundle) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
    let logits = head_logits(cls, w)?;
    let probs = softmax(&logits)?;
    Ok((logits, probs))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Runs the full instrumented forward pass on a preprocessed image.
pub fn forward(patches: &PatchMatrix, w: &WeightBundle, capture: CaptureFlags) -> Result<InferenceTrace, ModelError> {
    let started = Instant::now();
    let tokens = embed_tokens(patches, w)?;
    let encoded = encode(&tokens, w, capture)?;
    let cls_rows: Vec<&[f32]> = encoded.states.iter().map(|s| s.row(0)).collect();
    let cls_per_layer = Matrix::from_rows(&cls_rows)?;
    let (final_logits, probabilities) = classify(cls_per_layer.row(w.config.num_layers), w)?;
    let logit_lens = compute_logit_lens(&cls_per_layer, w)?;
    let predicted_class = argmax(&probabilities);
    let hidden_states = capture
        .hidden_states
        .then(|| encoded.states[1..].to_vec());
    Ok(InferenceTrace {
        config: w.config,
        patch_grid: patches.grid(),
        tokens_embedded: tokens,
        attention: encoded.attention,
        hidden_states,
        cls_per_layer,
        final_logits,
        probabilities,
        logit_lens,
        predicted_class,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

impl InferenceTrace {
    /// L2 norm of the CLS state at every depth.
    pub fn cls_norms(&self) -> Vec<f32> {
        self.cls_per_layer
            .iter_rows()
            .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32)
            .collect()
    }
}
