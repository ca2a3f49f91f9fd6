// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the vit-lens engine.
//!
//! Models and traces are opaque heap handles created by `vit_model_load*` /
//! `vit_infer` and released with the matching `*_free`. Every fallible call
//! returns a [`VitStatus`]; on failure [`vit_last_error`] describes the cause
//! for the calling thread. Panics never cross the boundary.
//!
//! The header lives at `include/vit_lens.h` and is regenerated by the build
//! script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vit_lens::engine::{Engine, EngineError, Inference};
use vit_lens::lens::{attention_slice, HeadSelector};
use vit_lens::report::{CaptureMode, TraceOptions};
use vit_lens::weights::WeightBundle;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    WeightError = 3,
    ImageError = 4,
    ModelError = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// How much of the trace to capture.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitCapture {
    None = 0,
    Attention = 1,
    Full = 2,
}

/// Model hyperparameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VitModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub grid_side: usize,
    pub num_classes: usize,
    pub token_count: usize,
}

/// Opaque loaded model.
pub struct VitModel {
    engine: Engine,
}

/// Opaque inference result.
pub struct VitTrace {
    inference: Inference,
    json: CString,
}

/// Selects the head-averaged attention in [`vit_trace_attention`].
pub const VIT_HEAD_MEAN: i32 = -1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes replaced"));
}

fn fail(status: VitStatus, message: impl Into<String>) -> VitStatus {
    set_error(message);
    status
}

fn engine_status(e: &EngineError) -> VitStatus {
    match e {
        EngineError::Weights(_) | EngineError::Labels(_) => VitStatus::WeightError,
        EngineError::Image(_) => VitStatus::ImageError,
        EngineError::Lens(_) => VitStatus::OutOfRange,
        EngineError::Model(_) => VitStatus::ModelError,
    }
}

fn guarded(f: impl FnOnce() -> VitStatus) -> VitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(VitStatus::Panic, "internal panic"),
    }
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> &'a [u8] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(data, len)
    }
}

fn heads(num_heads: usize) -> Option<usize> {
    (num_heads != 0).then_some(num_heads)
}

fn copy_out(values: &[f32], out: *mut f32, out_len: usize) -> VitStatus {
    if out.is_null() {
        return fail(VitStatus::NullArgument, "output buffer is null");
    }
    if out_len < values.len() {
        return fail(
            VitStatus::BufferTooSmall,
            format!("buffer holds {out_len} floats, {} needed", values.len()),
        );
    }
    // SAFETY: caller guarantees `out` points to `out_len` writable floats.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    VitStatus::Ok
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn vit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a safetensors file. `num_heads = 0` reads the head count from the
/// file's metadata. `labels_path` may be null.
///
/// # Safety
/// `path` must be a NUL-terminated string, `labels_path` null or
/// NUL-terminated, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vit_model_load(
    path: *const c_char,
    labels_path: *const c_char,
    num_heads: usize,
    out: *mut *mut VitModel,
) -> VitStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(VitStatus::NullArgument, "path and out must not be null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(VitStatus::InvalidArgument, "path is not UTF-8");
        };
        let labels = if labels_path.is_null() {
            None
        } else {
            match CStr::from_ptr(labels_path).to_str() {
                Ok(p) => Some(Path::new(p)),
                Err(_) => return fail(VitStatus::InvalidArgument, "labels_path is not UTF-8"),
            }
        };
        match Engine::load(Path::new(path), labels, heads(num_heads)) {
            Ok(engine) => {
                *out = Box::into_raw(Box::new(VitModel { engine }));
                VitStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// Loads a model from an in-memory safetensors image.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vit_model_load_bytes(
    data: *const u8,
    len: usize,
    num_heads: usize,
    out: *mut *mut VitModel,
) -> VitStatus {
    guarded(|| {
        if (data.is_null() && len > 0) || out.is_null() {
            return fail(VitStatus::NullArgument, "data and out must not be null");
        }
        match WeightBundle::from_bytes(bytes(data, len), heads(num_heads)) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(VitModel { engine: Engine::new(w) }));
                VitStatus::Ok
            }
            Err(e) => fail(VitStatus::WeightError, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from `vit_model_load*` and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn vit_model_free(model: *mut VitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vit_model_config(model: *const VitModel, out: *mut VitModelConfig) -> VitStatus {
    if model.is_null() || out.is_null() {
        return fail(VitStatus::NullArgument, "model and out must not be null");
    }
    let c = &(*model).engine.weights.config;
    *out = VitModelConfig {
        num_layers: c.num_layers,
        num_heads: c.num_heads,
        hidden_dim: c.hidden_dim,
        patch_size: c.patch_size,
        image_side: c.image_side,
        grid_side: c.grid_side,
        num_classes: c.num_classes,
        token_count: c.token_count(),
    };
    VitStatus::Ok
}

/// Decodes a PNG/JPEG buffer and runs the traced forward pass. `top_k`
/// controls the ranked list in the JSON form.
///
/// # Safety
/// `model` must be valid, `image` must point to `len` readable bytes and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vit_infer(
    model: *const VitModel,
    image: *const u8,
    len: usize,
    capture: VitCapture,
    top_k: usize,
    out: *mut *mut VitTrace,
) -> VitStatus {
    guarded(|| {
        if model.is_null() || out.is_null() || (image.is_null() && len > 0) {
            return fail(VitStatus::NullArgument, "model, image and out must not be null");
        }
        let opts = TraceOptions {
            capture: match capture {
                VitCapture::None => CaptureMode::None,
                VitCapture::Attention => CaptureMode::Attention,
                VitCapture::Full => CaptureMode::Full,
            },
            top_k,
            tracked_classes: Vec::new(),
        };
        match (*model).engine.infer(bytes(image, len), &opts) {
            Ok(inference) => {
                let json = CString::new(inference.json.clone()).expect("JSON has no NUL");
                *out = Box::into_raw(Box::new(VitTrace { inference, json }));
                VitStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `trace` must come from `vit_infer` and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_free(trace: *mut VitTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Predicted class index, or `SIZE_MAX` for a null trace.
///
/// # Safety
/// `trace` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_predicted_class(trace: *const VitTrace) -> usize {
    if trace.is_null() {
        return usize::MAX;
    }
    (*trace).inference.trace.predicted_class
}

/// Copies the `num_classes` final logits into `out`.
///
/// # Safety
/// `trace` must be valid; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_logits(trace: *const VitTrace, out: *mut f32, out_len: usize) -> VitStatus {
    if trace.is_null() {
        return fail(VitStatus::NullArgument, "trace is null");
    }
    copy_out(&(*trace).inference.trace.final_logits, out, out_len)
}

/// Copies the `num_classes` softmax probabilities into `out`.
///
/// # Safety
/// `trace` must be valid; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_probabilities(trace: *const VitTrace, out: *mut f32, out_len: usize) -> VitStatus {
    if trace.is_null() {
        return fail(VitStatus::NullArgument, "trace is null");
    }
    copy_out(&(*trace).inference.trace.probabilities, out, out_len)
}

/// Copies the `(num_layers + 1) × num_classes` logit-lens matrix, row-major.
///
/// # Safety
/// `trace` must be valid; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_logit_lens(trace: *const VitTrace, out: *mut f32, out_len: usize) -> VitStatus {
    if trace.is_null() {
        return fail(VitStatus::NullArgument, "trace is null");
    }
    copy_out((*trace).inference.trace.logit_lens.data(), out, out_len)
}

/// Copies one `token_count × token_count` attention matrix, row-major.
/// `head = VIT_HEAD_MEAN` averages over heads.
///
/// # Safety
/// `trace` must be valid; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_attention(
    trace: *const VitTrace,
    layer: usize,
    head: i32,
    out: *mut f32,
    out_len: usize,
) -> VitStatus {
    guarded(|| {
        if trace.is_null() {
            return fail(VitStatus::NullArgument, "trace is null");
        }
        let selector = match head {
            VIT_HEAD_MEAN => HeadSelector::Mean,
            h if h >= 0 => HeadSelector::Head(h as usize),
            other => return fail(VitStatus::InvalidArgument, format!("invalid head {other}")),
        };
        let t = &(*trace).inference.trace;
        let tokens = t.config.token_count();
        let mut matrix = Vec::with_capacity(tokens * tokens);
        for token in 0..tokens {
            match attention_slice(t, layer, selector, token) {
                Ok(slice) => matrix.extend_from_slice(&slice.weights_to),
                Err(e) => return fail(VitStatus::OutOfRange, e.to_string()),
            }
        }
        copy_out(&matrix, out, out_len)
    })
}

/// The trace JSON document, owned by the trace and valid until
/// `vit_trace_free`.
///
/// # Safety
/// `trace` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn vit_trace_json(trace: *const VitTrace) -> *const c_char {
    if trace.is_null() {
        return ptr::null();
    }
    (*trace).json.as_ptr()
}
