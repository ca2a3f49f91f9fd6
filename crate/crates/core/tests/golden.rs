// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny-model equivalence against the numpy reference, plus container and
//! decoder fixtures produced by independent tools.

mod common;

use common::*;
use vit_lens::image::{decode_image, preprocess, Normalization};
use vit_lens::lens::{attention_slice, compute_logit_lens, HeadSelector};
use vit_lens::model::{classify, embed_tokens, encoder_block, forward, multi_head_attention, CaptureFlags};
use vit_lens::weights::{parse_weight_file, serialize_table, Dtype, ModelConfig};
use vit_lens::ConfigView;

const TOL_BLOCK: f64 = 1e-5;
const TOL_TRACE: f64 = 1e-4;

fn tiny_patches() -> vit_lens::image::PatchMatrix {
    preprocess(&tiny_image(), 4, 2, &Normalization::default()).unwrap()
}

#[test]
fn single_tensor_container() {
    let table = parse_weight_file(&fixture_bytes("single_x.safetensors")).unwrap();
    assert_eq!(table.len(), 1);
    let x = table.get("x").unwrap();
    assert_eq!(x.shape, vec![2, 2]);
    assert_eq!(x.values, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn f16_is_widened() {
    let table = parse_weight_file(&fixture_bytes("f16_tensor.safetensors")).unwrap();
    let h = table.get("h").unwrap();
    assert_eq!(h.dtype, Dtype::F16);
    let expected: Vec<f32> = serde_json::from_slice(&fixture_bytes("f16_expected.json")).unwrap();
    assert_eq!(h.values, expected);
}

#[test]
fn tiny_model_config_is_inferred() {
    let table = parse_weight_file(&fixture_bytes("tiny_model.safetensors")).unwrap();
    let cfg = ModelConfig::infer(&table, None).unwrap();
    let view = ConfigView::from(&cfg);
    let want: ConfigView = serde_json::from_value(golden()["config"].clone()).unwrap();
    assert_eq!(view, want);
    assert_eq!(cfg.mlp_ratio, 4);
}

#[test]
fn container_round_trip_is_bit_exact() {
    let bytes = fixture_bytes("tiny_model.safetensors");
    let table = parse_weight_file(&bytes).unwrap();
    let again = parse_weight_file(&serialize_table(&table)).unwrap();
    assert_eq!(table.tensors.len(), again.tensors.len());
    for (name, t) in &table.tensors {
        let u = &again.tensors[name];
        assert_eq!(t.shape, u.shape);
        let a: Vec<u32> = t.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = u.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{name}");
    }
    let w = tiny_weights();
    assert_eq!(vit_lens::weights::bind_weights(&w.to_table(), &w.config).unwrap(), w);
}

#[test]
fn jpeg_matches_reference_decoder() {
    let img = decode_image(&fixture_bytes("tiny_2x2.jpg")).unwrap();
    let want: Vec<i32> = serde_json::from_slice(&fixture_bytes("tiny_2x2_decoded.json")).unwrap();
    assert_eq!((img.width, img.height), (2, 2));
    for (got, want) in img.pixels.iter().zip(&want) {
        assert!((i32::from(*got) - want).abs() <= 2, "{got} vs {want}");
    }
}

#[test]
fn pixels_and_patches_match_reference() {
    let g = golden();
    let img = decode_image(&tiny_image()).unwrap();
    let want: Vec<u8> = flat(&g["pixels"]).into_iter().map(|v| v as u8).collect();
    assert_eq!(img.pixels, want);
    assert_close(tiny_patches().vectors.data(), &flat(&g["patches"]), 1e-6, "patches");
}

#[test]
fn embedding_matches_reference() {
    let x = embed_tokens(&tiny_patches(), &tiny_weights()).unwrap();
    assert_eq!(x.shape(), (5, 8));
    assert_close(x.data(), &flat(&golden()["tokens_embedded"]), TOL_BLOCK, "tokens_embedded");
}

#[test]
fn attention_on_random_input_matches_reference() {
    let g = golden();
    let w = tiny_weights();
    let case = &g["mha_random"];
    let x = matrix(&case["input"]);
    let (out, rec) = multi_head_attention(&x, &w.layers[0], &w.config, 0, CaptureFlags::default()).unwrap();
    assert_close(out.data(), &flat(&case["output"]), TOL_BLOCK, "mha output");
    let attn: Vec<f32> = rec.weights.iter().flat_map(|m| m.data().to_vec()).collect();
    assert_close(&attn, &flat(&case["attention"]), TOL_BLOCK, "mha attention");
}

#[test]
fn each_block_matches_reference() {
    let g = golden();
    let w = tiny_weights();
    for (l, layer) in g["layers"].as_array().unwrap().iter().enumerate() {
        let x = matrix(&layer["input"]);
        let (y, rec) = encoder_block(&x, l, &w, CaptureFlags::full()).unwrap();
        assert_close(y.data(), &flat(&layer["output"]), TOL_BLOCK, "block output");
        let cat = |ms: &[vit_lens::Matrix]| ms.iter().flat_map(|m| m.data().to_vec()).collect::<Vec<f32>>();
        assert_close(&cat(&rec.weights), &flat(&layer["attention"]), TOL_BLOCK, "attention");
        assert_close(&cat(rec.scores.as_ref().unwrap()), &flat(&layer["scores"]), TOL_BLOCK, "scores");
        let qkv = rec.qkv.as_ref().unwrap();
        assert_close(&cat(&qkv.q), &flat(&layer["q"]), TOL_BLOCK, "q");
        assert_close(&cat(&qkv.k), &flat(&layer["k"]), TOL_BLOCK, "k");
        assert_close(&cat(&qkv.v), &flat(&layer["v"]), TOL_BLOCK, "v");
    }
}

#[test]
fn classification_and_lens_match_reference() {
    let g = golden();
    let w = tiny_weights();
    let cls = matrix(&g["cls_per_layer"]);
    let (logits, probs) = classify(cls.row(2), &w).unwrap();
    assert_close(&logits, &flat(&g["logits"]), TOL_TRACE, "logits");
    assert_close(&probs, &flat(&g["probabilities"]), TOL_TRACE, "probabilities");
    let lens = compute_logit_lens(&cls, &w).unwrap();
    assert_eq!(lens.shape(), (3, 5));
    assert_close(lens.data(), &flat(&g["logit_lens"]), TOL_TRACE, "logit lens");
}

#[test]
fn full_trace_matches_reference() {
    let g = golden();
    let trace = forward(&tiny_patches(), &tiny_weights(), CaptureFlags::full()).unwrap();
    let attn: Vec<f32> = trace
        .attention
        .iter()
        .flat_map(|r| r.weights.iter().flat_map(|m| m.data().to_vec()))
        .collect();
    let want_attn: Vec<f64> = g["layers"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| flat(&l["attention"]))
        .collect();
    assert_close(&attn, &want_attn, TOL_TRACE, "attention");
    assert_close(trace.cls_per_layer.data(), &flat(&g["cls_per_layer"]), TOL_TRACE, "cls");
    assert_close(trace.logit_lens.data(), &flat(&g["logit_lens"]), TOL_TRACE, "lens");
    assert_close(&trace.final_logits, &flat(&g["logits"]), TOL_TRACE, "logits");
    assert_eq!(trace.predicted_class as u64, g["predicted_class"].as_u64().unwrap());
    let hidden = trace.hidden_states.as_ref().unwrap();
    for (l, layer) in g["layers"].as_array().unwrap().iter().enumerate() {
        assert_close(hidden[l].data(), &flat(&layer["output"]), TOL_TRACE, "hidden");
    }
}

#[test]
fn slice_indexes_golden_trace() {
    let g = golden();
    let trace = forward(&tiny_patches(), &tiny_weights(), CaptureFlags::default()).unwrap();
    let slice = attention_slice(&trace, 1, HeadSelector::Head(0), 0).unwrap();
    let a = &g["layers"][1]["attention"][0];
    let row: Vec<f64> = flat(&a[0]);
    let col: Vec<f64> = (0..5).map(|r| a[r][0].as_f64().unwrap()).collect();
    assert_close(&slice.weights_to, &row, TOL_TRACE, "weights_to");
    assert_close(&slice.weights_from, &col, TOL_TRACE, "weights_from");
    let grid: Vec<f32> = slice.patch_values.concat();
    assert_close(&grid, &row[1..], TOL_TRACE, "patch_values");
    assert_eq!(slice.patch_values.len(), 2);
}
