// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytics derived from a trace: the logit-lens trajectory, top-k rankings
//! and attention slices for overlays.
//!
//! The logit lens applies the final layer norm and the classification head to
//! the CLS state at every depth, including the post-embedding state at row 0.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{head_logits, InferenceTrace};
use crate::tensor::{softmax, Matrix, TensorError};
use crate::weights::WeightBundle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LensError {
    #[error("k = {k} is outside [1, {classes}]")]
    KOutOfRange { k: usize, classes: usize },
    #[error("{what} index {index} out of range (must be < {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Classification-head logits for every CLS state: `(L+1) × C`.
pub fn compute_logit_lens(cls_per_layer: &Matrix, w: &WeightBundle) -> Result<Matrix, TensorError> {
    let rows = cls_per_layer
        .iter_rows()
        .map(|cls| head_logits(cls, w))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, w.config.num_classes));
    }
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class_index: usize,
    pub logit: f32,
    /// Softmax over the full logit vector, not just the top k.
    pub probability: f32,
}

/// The `k` largest logits, descending; ties go to the lower class index.
pub fn top_k(logits: &[f32], k: usize) -> Result<Vec<RankedClass>, LensError> {
    if k == 0 || k > logits.len() {
        return Err(LensError::KOutOfRange {
            k,
            classes: logits.len(),
        });
    }
    let probs = softmax(logits)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    let cmp = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order
        .into_iter()
        .map(|i| RankedClass {
            class_index: i,
            logit: logits[i],
            probability: probs[i],
        })
        .collect())
}

/// Per-depth predictions for charting.
#[derive(Debug, Clone, PartialEq)]
pub struct LensTrajectory {
    pub per_layer_logits: Matrix,
    pub per_layer_probabilities: Matrix,
    pub per_layer_topk: Vec<Vec<RankedClass>>,
    pub tracked_classes: BTreeSet<usize>,
}

impl LensTrajectory {
    pub fn from_trace(trace: &InferenceTrace, k: usize, tracked: impl IntoIterator<Item = usize>) -> Result<Self, LensError> {
        let classes = trace.config.num_classes;
        let tracked: BTreeSet<usize> = tracked.into_iter().collect();
        if let Some(&bad) = tracked.iter().find(|&&c| c >= classes) {
            return Err(LensError::IndexOutOfRange {
                what: "class",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = Vec::with_capacity(trace.logit_lens.rows());
        let mut per_layer_topk = Vec::with_capacity(trace.logit_lens.rows());
        for row in trace.logit_lens.iter_rows() {
            probs.push(softmax(row)?);
            per_layer_topk.push(top_k(row, k)?);
        }
        Ok(Self {
            per_layer_logits: trace.logit_lens.clone(),
            per_layer_probabilities: Matrix::from_rows(&probs)?,
            per_layer_topk,
            tracked_classes: tracked,
        })
    }

    /// Tracked classes plus every class in the final-layer top-k, ascending.
    pub fn chart_classes(&self) -> Vec<usize> {
        let mut set = self.tracked_classes.clone();
        if let Some(last) = self.per_layer_topk.last() {
            set.extend(last.iter().map(|r| r.class_index));
        }
        set.into_iter().collect()
    }
}

/// A single head or the mean over heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelector {
    Head(usize),
    Mean,
}

impl fmt::Display for HeadSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadSelector::Head(h) => write!(f, "{h}"),
            HeadSelector::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for HeadSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("mean") {
            return Ok(HeadSelector::Mean);
        }
        s.parse()
            .map(HeadSelector::Head)
            .map_err(|_| format!("head must be an index or \"mean\", got {s:?}"))
    }
}

impl Serialize for HeadSelector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            HeadSelector::Head(h) => s.serialize_u64(*h as u64),
            HeadSelector::Mean => s.serialize_str("mean"),
        }
    }
}

impl<'de> Deserialize<'de> for HeadSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(h) => Ok(HeadSelector::Head(h)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One token's attention row and column at a given layer/head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSlice {
    pub layer: usize,
    pub head: HeadSelector,
    /// 0 is CLS, `1..T` are patches.
    pub token: usize,
    /// How much `token` attends to each token (row).
    pub weights_to: Vec<f32>,
    /// How much each token attends to `token` (column).
    pub weights_from: Vec<f32>,
    /// `weights_to[1..]` laid out on the patch grid, row-major.
    pub patch_values: Vec<Vec<f32>>,
}

pub fn attention_slice(
    trace: &InferenceTrace,
    layer: usize,
    head: HeadSelector,
    token: usize,
) -> Result<AttentionSlice, LensError> {
    let cfg = &trace.config;
    let check = |what, index, bound| {
        if index < bound {
            Ok(())
        } else {
            Err(LensError::IndexOutOfRange { what, index, bound })
        }
    };
    check("layer", layer, trace.attention.len())?;
    if let HeadSelector::Head(h) = head {
        check("head", h, cfg.num_heads)?;
    }
    let t = cfg.token_count();
    check("token", token, t)?;

    let record = &trace.attention[layer];
    let matrix = match head {
        HeadSelector::Head(h) => record.weights[h].clone(),
        HeadSelector::Mean => {
            let n = record.weights.len() as f64;
            let mut sum = vec![0.0f64; t * t];
            for m in &record.weights {
                for (acc, &v) in sum.iter_mut().zip(m.data()) {
                    *acc += f64::from(v);
                }
            }
            Matrix::from_vec(t, t, sum.into_iter().map(|v| (v / n) as f32).collect())?
        }
    };
    let weights_to = matrix.row(token).to_vec();
    let weights_from: Vec<f32> = (0..t).map(|r| matrix.get(r, token)).collect();
    let patch_values = weights_to[1..]
        .chunks(cfg.grid_side)
        .map(<[f32]>::to_vec)
        .collect();
    Ok(AttentionSlice {
        layer,
        head,
        token,
        weights_to,
        weights_from,
        patch_values,
    })
}
