// SPDX-License-Identifier: MIT OR Apache-2.0

//! # vit-lens
//!
//! Instrumented Vision Transformer inference. A forward pass records every
//! intermediate an explainer UI needs: per-layer, per-head attention (and
//! optionally the scores and Q/K/V behind it), the CLS state at every depth,
//! and the logit-lens trajectory obtained by applying the classification head
//! to each of those states.
//!
//! ```no_run
//! use vit_lens::{Engine, TraceOptions};
//!
//! let engine = Engine::load("model.safetensors".as_ref(), None, None)?;
//! let out = engine.infer(&std::fs::read("cat.png")?, &TraceOptions::default())?;
//! println!("class {} via {} layers", out.trace.predicted_class, out.trace.attention.len());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```
//!
//! Modules, bottom-up: [`tensor`] kernels, [`weights`] loading, [`image`]
//! preprocessing, [`model`] forward pass, [`lens`] analytics, [`report`]
//! wire format, [`service`] HTTP API.

pub mod engine;
pub mod image;
pub mod labels;
pub mod lens;
pub mod model;
pub mod report;
pub mod service;
pub mod tensor;
pub mod weights;

pub use engine::{Engine, EngineError, Inference};
pub use lens::{attention_slice, compute_logit_lens, top_k, AttentionSlice, HeadSelector, LensTrajectory};
pub use model::{forward, CaptureFlags, InferenceTrace};
pub use report::{CaptureMode, ConfigView, TraceOptions};
pub use tensor::Matrix;
pub use weights::{ModelConfig, WeightBundle};
