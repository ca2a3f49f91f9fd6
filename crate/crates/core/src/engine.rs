// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loaded model plus preprocessing settings: bytes in, trace out.

use std::path::Path;

use thiserror::Error;

use crate::image::{preprocess, ImageError, Normalization};
use crate::labels::{LabelError, Labels};
use crate::lens::LensError;
use crate::model::{forward, InferenceTrace, ModelError};
use crate::report::{render_trace, trace_id, TraceOptions};
use crate::weights::{WeightBundle, WeightError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lens(#[from] LensError),
}

/// Result of one inference: the in-memory trace and its wire form.
#[derive(Debug, Clone)]
pub struct Inference {
    pub trace_id: String,
    pub trace: InferenceTrace,
    pub json: String,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub weights: WeightBundle,
    pub labels: Labels,
    pub normalization: Normalization,
}

impl Engine {
    pub fn new(weights: WeightBundle) -> Self {
        let labels = Labels::numeric(weights.config.num_classes);
        Self {
            weights,
            labels,
            normalization: Normalization::default(),
        }
    }

    pub fn load(weights: &Path, labels: Option<&Path>, num_heads: Option<usize>) -> Result<Self, EngineError> {
        let weights = WeightBundle::load(weights, num_heads)?;
        let labels = Labels::load_or_numeric(labels, weights.config.num_classes)?;
        Ok(Self {
            labels,
            ..Self::new(weights)
        })
    }

    /// Decodes and preprocesses `image_bytes`, runs the traced forward pass.
    pub fn trace(&self, image_bytes: &[u8], opts: &TraceOptions) -> Result<InferenceTrace, EngineError> {
        let cfg = &self.weights.config;
        let patches = preprocess(image_bytes, cfg.image_side, cfg.patch_size, &self.normalization)?;
        Ok(forward(&patches, &self.weights, opts.capture.flags())?)
    }

    /// [`Engine::trace`] plus serialization.
    pub fn infer(&self, image_bytes: &[u8], opts: &TraceOptions) -> Result<Inference, EngineError> {
        let trace = self.trace(image_bytes, opts)?;
        let id = trace_id(image_bytes, opts);
        let json = render_trace(&trace, &id, &self.labels, opts)?;
        Ok(Inference {
            trace_id: id,
            trace,
            json,
        })
    }
}
