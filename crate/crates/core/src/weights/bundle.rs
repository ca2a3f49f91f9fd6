// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{parse_weight_file, ModelConfig, RawTensor, TensorTable, WeightError};
use crate::tensor::Matrix;

/// Parameters of one pre-LN encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    /// Fused `[D, 3D]` projection; columns are Q, then K, then V.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f32>,
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub w_mlp1: Matrix,
    pub b_mlp1: Vec<f32>,
    pub w_mlp2: Matrix,
    pub b_mlp2: Vec<f32>,
}

/// All parameters of a ViT classifier, shape-checked against its config.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ModelConfig,
    pub patch_proj: Matrix,
    pub patch_bias: Vec<f32>,
    pub pos_embed: Matrix,
    pub cls_token: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Vec<f32>,
    pub final_ln_beta: Vec<f32>,
    pub head_w: Matrix,
    pub head_b: Vec<f32>,
}

struct Binder<'a> {
    table: &'a TensorTable,
}

impl Binder<'_> {
    fn take(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>, WeightError> {
        let tensor = self
            .table
            .get(name)
            .ok_or_else(|| WeightError::MissingTensor(name.to_string()))?;
        if tensor.shape != expected {
            return Err(WeightError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: tensor.shape.clone(),
            });
        }
        if tensor.values.iter().any(|v| !v.is_finite()) {
            return Err(WeightError::NonFiniteWeight(name.to_string()));
        }
        Ok(tensor.values.clone())
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>, WeightError> {
        self.take(name, &[len])
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix, WeightError> {
        let values = self.take(name, &[rows, cols])?;
        Ok(Matrix::from_vec(rows, cols, values).expect("shape checked"))
    }

    /// Fused QKV if present, otherwise separate `attn.{q,k,v}` tensors
    /// concatenated column-wise in Q, K, V order.
    fn qkv(&self, prefix: &str, d: usize) -> Result<(Matrix, Vec<f32>), WeightError> {
        let fused = format!("{prefix}attn.qkv.weight");
        if self.table.get(&fused).is_some() {
            return Ok((
                self.matrix(&fused, d, 3 * d)?,
                self.vector(&format!("{prefix}attn.qkv.bias"), 3 * d)?,
            ));
        }
        let split = ["q", "k", "v"]
            .iter()
            .map(|part| {
                Ok((
                    self.matrix(&format!("{prefix}attn.{part}.weight"), d, d)?,
                    self.vector(&format!("{prefix}attn.{part}.bias"), d)?,
                ))
            })
            .collect::<Result<Vec<_>, WeightError>>()
            .map_err(|e| match e {
                // Report the fused name: it is the canonical one.
                WeightError::MissingTensor(_) => WeightError::MissingTensor(fused.clone()),
                other => other,
            })?;
        let mut w = Matrix::zeros(d, 3 * d);
        let mut b = Vec::with_capacity(3 * d);
        for (part, (pw, pb)) in split.iter().enumerate() {
            for r in 0..d {
                w.row_mut(r)[part * d..(part + 1) * d].copy_from_slice(pw.row(r));
            }
            b.extend_from_slice(pb);
        }
        Ok((w, b))
    }
}

/// Fills a [`WeightBundle`] from a parsed table using the canonical names.
pub fn bind_weights(table: &TensorTable, config: &ModelConfig) -> Result<WeightBundle, WeightError> {
    config.validate()?;
    let b = Binder { table };
    let d = config.hidden_dim;
    let mlp = config.mlp_dim();
    let layers = (0..config.num_layers)
        .map(|l| {
            let p = format!("blocks.{l}.");
            let (w_qkv, b_qkv) = b.qkv(&p, d)?;
            Ok(LayerWeights {
                ln1_gamma: b.vector(&format!("{p}ln1.weight"), d)?,
                ln1_beta: b.vector(&format!("{p}ln1.bias"), d)?,
                w_qkv,
                b_qkv,
                w_out: b.matrix(&format!("{p}attn.out.weight"), d, d)?,
                b_out: b.vector(&format!("{p}attn.out.bias"), d)?,
                ln2_gamma: b.vector(&format!("{p}ln2.weight"), d)?,
                ln2_beta: b.vector(&format!("{p}ln2.bias"), d)?,
                w_mlp1: b.matrix(&format!("{p}mlp.fc1.weight"), d, mlp)?,
                b_mlp1: b.vector(&format!("{p}mlp.fc1.bias"), mlp)?,
                w_mlp2: b.matrix(&format!("{p}mlp.fc2.weight"), mlp, d)?,
                b_mlp2: b.vector(&format!("{p}mlp.fc2.bias"), d)?,
            })
        })
        .collect::<Result<Vec<_>, WeightError>>()?;
    Ok(WeightBundle {
        config: *config,
        patch_proj: b.matrix("patch_embed.weight", config.patch_dim(), d)?,
        patch_bias: b.vector("patch_embed.bias", d)?,
        pos_embed: b.matrix("pos_embed", config.token_count(), d)?,
        cls_token: b.vector("cls_token", d)?,
        layers,
        final_ln_gamma: b.vector("final_ln.weight", d)?,
        final_ln_beta: b.vector("final_ln.bias", d)?,
        head_w: b.matrix("head.weight", d, config.num_classes)?,
        head_b: b.vector("head.bias", config.num_classes)?,
    })
}

impl WeightBundle {
    /// Parses, infers the config, and binds in one step.
    pub fn from_bytes(bytes: &[u8], num_heads: Option<usize>) -> Result<Self, WeightError> {
        let table = parse_weight_file(bytes)?;
        let config = ModelConfig::infer(&table, num_heads)?;
        bind_weights(&table, &config)
    }

    pub fn load(path: impl AsRef<Path>, num_heads: Option<usize>) -> Result<Self, WeightError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, num_heads)
    }

    /// Canonical-name table, fused QKV, with config metadata.
    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::default();
        let mut vec = |name: String, v: &[f32]| t.insert(name, RawTensor::f32(vec![v.len()], v.to_vec()));
        vec("patch_embed.bias".into(), &self.patch_bias);
        vec("cls_token".into(), &self.cls_token);
        vec("final_ln.weight".into(), &self.final_ln_gamma);
        vec("final_ln.bias".into(), &self.final_ln_beta);
        vec("head.bias".into(), &self.head_b);
        for (l, w) in self.layers.iter().enumerate() {
            vec(format!("blocks.{l}.ln1.weight"), &w.ln1_gamma);
            vec(format!("blocks.{l}.ln1.bias"), &w.ln1_beta);
            vec(format!("blocks.{l}.attn.qkv.bias"), &w.b_qkv);
            vec(format!("blocks.{l}.attn.out.bias"), &w.b_out);
            vec(format!("blocks.{l}.ln2.weight"), &w.ln2_gamma);
            vec(format!("blocks.{l}.ln2.bias"), &w.ln2_beta);
            vec(format!("blocks.{l}.mlp.fc1.bias"), &w.b_mlp1);
            vec(format!("blocks.{l}.mlp.fc2.bias"), &w.b_mlp2);
        }
        let mut mat = |name: String, m: &Matrix| {
            t.insert(name, RawTensor::f32(vec![m.rows(), m.cols()], m.data().to_vec()))
        };
        mat("patch_embed.weight".into(), &self.patch_proj);
        mat("pos_embed".into(), &self.pos_embed);
        mat("head.weight".into(), &self.head_w);
        for (l, w) in self.layers.iter().enumerate() {
            mat(format!("blocks.{l}.attn.qkv.weight"), &w.w_qkv);
            mat(format!("blocks.{l}.attn.out.weight"), &w.w_out);
            mat(format!("blocks.{l}.mlp.fc1.weight"), &w.w_mlp1);
            mat(format!("blocks.{l}.mlp.fc2.weight"), &w.w_mlp2);
        }
        t.metadata
            .insert("num_heads".into(), self.config.num_heads.to_string());
        t.metadata.insert("ln_eps".into(), self.config.ln_eps.to_string());
        t
    }

    /// Seeded random initialization, uniform in ±1/√fan_in for projections.
    /// Used for shape conformance and benchmarking, not for predictions.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, WeightError> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mlp = config.mlp_dim();
        let mut matrix = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f32).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let patch_proj = matrix(config.patch_dim(), d);
        let pos_embed = matrix(config.token_count(), d);
        let cls_row = matrix(1, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                w_qkv: matrix(d, 3 * d),
                b_qkv: vec![0.0; 3 * d],
                w_out: matrix(d, d),
                b_out: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w_mlp1: matrix(d, mlp),
                b_mlp1: vec![0.0; mlp],
                w_mlp2: matrix(mlp, d),
                b_mlp2: vec![0.0; d],
            })
            .collect();
        let head_w = matrix(d, config.num_classes);
        Ok(Self {
            config: *config,
            patch_proj,
            patch_bias: vec![0.0; d],
            pos_embed,
            cls_token: cls_row.into_vec(),
            layers,
            final_ln_gamma: vec![1.0; d],
            final_ln_beta: vec![0.0; d],
            head_w,
            head_b: vec![0.0; config.num_classes],
        })
    }
}
