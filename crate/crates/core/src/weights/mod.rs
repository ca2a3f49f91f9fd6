// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model configuration and weight loading.

mod bundle;
mod container;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{bind_weights, LayerWeights, WeightBundle};
pub use container::{parse_weight_file, serialize_table, Dtype, RawTensor, TensorTable};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?} data offsets [{begin}, {end}) fall outside the {buffer_len}-byte buffer")]
    OffsetOutOfBounds {
        name: String,
        begin: usize,
        end: usize,
        buffer_len: usize,
    },
    #[error("tensor {name:?} has unsupported dtype {dtype} (expected F32 or F16)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor name {0:?} appears more than once")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {0:?} contains NaN or Inf")]
    NonFiniteWeight(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("reading weights: {0}")]
    Io(#[from] std::io::Error),
}

/// Architectural hyperparameters of a ViT classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub grid_side: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f32,
}

pub const DEFAULT_LN_EPS: f32 = 1e-6;

impl ModelConfig {
    /// FlexiViT-Large on a 3×3 grid of 32-pixel patches with an ImageNet-1k head.
    pub fn flexivit_large_3x3() -> Self {
        Self {
            num_layers: 24,
            num_heads: 16,
            hidden_dim: 1024,
            patch_size: 32,
            image_side: 96,
            grid_side: 3,
            num_classes: 1000,
            mlp_ratio: 4,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Patches plus the CLS token.
    pub fn token_count(&self) -> usize {
        self.num_patches() + 1
    }

    /// Length of one flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.hidden_dim
    }

    pub fn validate(&self) -> Result<(), WeightError> {
        let bad = |msg: String| Err(WeightError::InvalidConfig(msg));
        if self.num_layers == 0
            || self.num_heads == 0
            || self.hidden_dim == 0
            || self.patch_size == 0
            || self.grid_side == 0
            || self.num_classes == 0
            || self.mlp_ratio == 0
        {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.image_side != self.grid_side * self.patch_size {
            return bad(format!(
                "image_side {} != grid_side {} × patch_size {}",
                self.image_side, self.grid_side, self.patch_size
            ));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    /// Recovers the configuration from tensor shapes.
    ///
    /// Everything except the head count follows from the canonical shapes. The
    /// head count comes from `num_heads_override`, else the container's
    /// `num_heads` metadata key. `ln_eps` is read from metadata when present.
    pub fn infer(table: &TensorTable, num_heads_override: Option<usize>) -> Result<Self, WeightError> {
        let shape = |name: &str| -> Result<&[usize], WeightError> {
            table
                .get(name)
                .map(|t| t.shape.as_slice())
                .ok_or_else(|| WeightError::MissingTensor(name.to_string()))
        };
        let matrix = |name: &str| -> Result<(usize, usize), WeightError> {
            match shape(name)? {
                [r, c] => Ok((*r, *c)),
                other => Err(WeightError::InvalidConfig(format!(
                    "{name:?} must be 2-D, got shape {other:?}"
                ))),
            }
        };

        let (patch_dim, hidden_dim) = matrix("patch_embed.weight")?;
        let patch_size = exact_sqrt(patch_dim / 3)
            .filter(|p| 3 * p * p == patch_dim)
            .ok_or_else(|| WeightError::InvalidConfig(format!("patch_embed rows {patch_dim} are not 3·P²")))?;
        let (tokens, _) = matrix("pos_embed")?;
        let grid_side = tokens
            .checked_sub(1)
            .and_then(exact_sqrt)
            .ok_or_else(|| WeightError::InvalidConfig(format!("pos_embed rows {tokens} are not grid² + 1")))?;
        let (_, num_classes) = matrix("head.weight")?;
        let num_layers = (0..)
            .take_while(|l| table.get(&format!("blocks.{l}.ln1.weight")).is_some())
            .count();
        if num_layers == 0 {
            return Err(WeightError::MissingTensor("blocks.0.ln1.weight".into()));
        }
        let (_, mlp_dim) = matrix("blocks.0.mlp.fc1.weight")?;
        if hidden_dim == 0 || mlp_dim % hidden_dim != 0 {
            return Err(WeightError::InvalidConfig(format!(
                "fc1 width {mlp_dim} is not a multiple of hidden_dim {hidden_dim}"
            )));
        }
        let num_heads = match num_heads_override {
            Some(h) => h,
            None => parse_metadata(table, "num_heads")?.ok_or_else(|| {
                WeightError::InvalidConfig(
                    "head count not derivable from shapes: add num_heads metadata or pass it explicitly".into(),
                )
            })?,
        };
        let ln_eps = parse_metadata(table, "ln_eps")?.unwrap_or(DEFAULT_LN_EPS);
        let config = Self {
            num_layers,
            num_heads,
            hidden_dim,
            patch_size,
            image_side: grid_side * patch_size,
            grid_side,
            num_classes,
            mlp_ratio: mlp_dim / hidden_dim,
            ln_eps,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_metadata<T: std::str::FromStr>(table: &TensorTable, key: &str) -> Result<Option<T>, WeightError> {
    table
        .metadata
        .get(key)
        .map(|raw| {
            raw.trim()
                .parse()
                .map_err(|_| WeightError::InvalidConfig(format!("metadata {key}={raw:?} does not parse")))
        })
        .transpose()
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}
