#!/usr/bin/env python3
# SPDX-License-Identifier: MIT OR Apache-2.0
"""Reference ViT forward pass (numpy, float64) producing the tiny-model fixtures.

Independent of the Rust engine: own safetensors writer, own preprocessing,
own attention/LN/GELU. Re-run to regenerate:

    python3 make_tiny_fixture.py
"""
import io
import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parent
SEED = 20260419

L, H, D, P, GRID, C = 2, 2, 8, 2, 2, 5
MLP = 4 * D
SIDE = GRID * P
T = GRID * GRID + 1
EPS = 1e-6


def write_safetensors(path, tensors, metadata=None, dtype="F32"):
    header = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        np_dtype = "<f4" if dtype == "F32" else "<f2"
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = metadata
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    text += b" " * ((8 - len(text) % 8) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)


def make_weights(rng):
    def n(*shape, s=1.0):
        return (rng.standard_normal(shape) * s).astype(np.float32)

    w = {
        "patch_embed.weight": n(3 * P * P, D, s=0.4),
        "patch_embed.bias": n(D, s=0.1),
        "pos_embed": n(T, D, s=0.2),
        "cls_token": n(D, s=0.5),
    }
    for l in range(L):
        p = f"blocks.{l}."
        w[p + "ln1.weight"] = (1.0 + n(D, s=0.1)).astype(np.float32)
        w[p + "ln1.bias"] = n(D, s=0.1)
        w[p + "attn.qkv.weight"] = n(D, 3 * D, s=0.5)
        w[p + "attn.qkv.bias"] = n(3 * D, s=0.1)
        w[p + "attn.out.weight"] = n(D, D, s=0.3)
        w[p + "attn.out.bias"] = n(D, s=0.1)
        w[p + "ln2.weight"] = (1.0 + n(D, s=0.1)).astype(np.float32)
        w[p + "ln2.bias"] = n(D, s=0.1)
        w[p + "mlp.fc1.weight"] = n(D, MLP, s=0.3)
        w[p + "mlp.fc1.bias"] = n(MLP, s=0.1)
        w[p + "mlp.fc2.weight"] = n(MLP, D, s=0.2)
        w[p + "mlp.fc2.bias"] = n(D, s=0.1)
    w["final_ln.weight"] = (1.0 + n(D, s=0.1)).astype(np.float32)
    w["final_ln.bias"] = n(D, s=0.1)
    w["head.weight"] = n(D, C, s=0.7)
    w["head.bias"] = n(C, s=0.2)
    return w


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + EPS) + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(x, w, l):
    p = f"blocks.{l}."
    qkv = x @ w[p + "attn.qkv.weight"] + w[p + "attn.qkv.bias"]
    dh = D // H
    heads = lambda m: m.reshape(T, H, dh).transpose(1, 0, 2)
    q, k, v = heads(qkv[:, :D]), heads(qkv[:, D:2 * D]), heads(qkv[:, 2 * D:])
    scores = np.einsum("htd,hsd->hts", q, k) / math.sqrt(D / H)
    attn = softmax(scores)
    o = np.einsum("hts,hsd->htd", attn, v).transpose(1, 0, 2).reshape(T, D)
    out = o @ w[p + "attn.out.weight"] + w[p + "attn.out.bias"]
    return out, scores, attn, q, k, v


def main():
    rng = np.random.default_rng(SEED)
    w32 = make_weights(rng)
    write_safetensors(
        OUT / "tiny_model.safetensors",
        w32,
        metadata={"num_heads": str(H), "ln_eps": "1e-6"},
    )
    w = {k: v.astype(np.float64) for k, v in w32.items()}

    pixels = rng.integers(0, 256, size=(SIDE, SIDE, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(OUT / "tiny_image.png")

    img = (pixels.astype(np.float64) / 255.0 - 0.5) / 0.5
    patches = []
    for gr in range(GRID):
        for gc in range(GRID):
            tile = img[gr * P:(gr + 1) * P, gc * P:(gc + 1) * P, :]
            patches.append(tile.reshape(-1))
    patches = np.stack(patches)

    emb = patches @ w["patch_embed.weight"] + w["patch_embed.bias"]
    x = np.concatenate([w["cls_token"][None, :], emb], axis=0) + w["pos_embed"]
    tokens = x.copy()

    layers = []
    cls = [x[0].copy()]
    for l in range(L):
        p = f"blocks.{l}."
        a_out, scores, attn, q, k, v = attention(
            layer_norm(x, w[p + "ln1.weight"], w[p + "ln1.bias"]), w, l)
        u = x + a_out
        hmid = gelu(layer_norm(u, w[p + "ln2.weight"], w[p + "ln2.bias"])
                    @ w[p + "mlp.fc1.weight"] + w[p + "mlp.fc1.bias"])
        y = u + hmid @ w[p + "mlp.fc2.weight"] + w[p + "mlp.fc2.bias"]
        layers.append({
            "input": x.tolist(),
            "attn_output": a_out.tolist(),
            "output": y.tolist(),
            "scores": scores.tolist(),
            "attention": attn.tolist(),
            "q": q.tolist(), "k": k.tolist(), "v": v.tolist(),
        })
        x = y
        cls.append(x[0].copy())

    cls = np.stack(cls)
    lens = layer_norm(cls, w["final_ln.weight"], w["final_ln.bias"]) @ w["head.weight"] + w["head.bias"]
    logits = lens[-1]
    probs = softmax(logits)

    mha_in = rng.standard_normal((T, D))
    mha_out, _, mha_attn, _, _, _ = attention(mha_in, w, 0)

    golden = {
        "config": {"num_layers": L, "num_heads": H, "hidden_dim": D, "patch_size": P,
                   "image_side": SIDE, "grid_side": GRID, "num_classes": C,
                   "token_count": T},
        "pixels": pixels.reshape(-1).tolist(),
        "patches": patches.tolist(),
        "tokens_embedded": tokens.tolist(),
        "layers": layers,
        "cls_per_layer": cls.tolist(),
        "logit_lens": lens.tolist(),
        "logits": logits.tolist(),
        "probabilities": probs.tolist(),
        "predicted_class": int(np.argmax(probs)),
        "mha_random": {"layer": 0, "input": mha_in.tolist(),
                        "output": mha_out.tolist(), "attention": mha_attn.tolist()},
    }
    (OUT / "tiny_golden.json").write_text(json.dumps(golden, indent=1))

    # Container fixtures for the parser.
    write_safetensors(OUT / "single_x.safetensors",
                      {"x": np.array([[1, 2], [3, 4]], dtype=np.float32)})
    f16_vals = np.array([0.5, -1.25, 3.0e-5, 65504.0, 1.0 / 3.0], dtype=np.float16)
    write_safetensors(OUT / "f16_tensor.safetensors", {"h": f16_vals}, dtype="F16")
    (OUT / "f16_expected.json").write_text(
        json.dumps([float(v) for v in f16_vals.astype(np.float32)]))

    # 2x2 JPEG decoded by Pillow's libjpeg as the reference decoder.
    jpx = np.array([[[200, 30, 40], [20, 180, 60]],
                    [[10, 40, 220], [250, 250, 250]]], dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(jpx, "RGB").save(buf, format="JPEG", quality=100, subsampling=0)
    (OUT / "tiny_2x2.jpg").write_bytes(buf.getvalue())
    decoded = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"))
    (OUT / "tiny_2x2_decoded.json").write_text(json.dumps(decoded.reshape(-1).tolist()))


if __name__ == "__main__":
    main()
