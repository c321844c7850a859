"""Straight-line numpy re-implementations used as test oracles.

Deliberately loop-based and graph-free so they share no code path with
the package: every value is recomputed token by token, head by head.
Layout conventions (patch flattening order, contiguous head slices) are
part of the tested contract and therefore mirrored here.
"""

import math

import numpy as np


def ref_layer_norm(x, gamma, beta, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1, x.shape[-1])
    target = out.reshape(-1, x.shape[-1])
    for i, row in enumerate(flat):
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        target[i] = (row - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def ref_gelu(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for v in it:
        out[it.multi_index] = float(v) * 0.5 * (1.0 + math.erf(float(v) / math.sqrt(2.0)))
    return out


def ref_softmax(v):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def ref_patch_tokens(image, patch_size, w, b):
    """image (C, H, W) -> (num_patches, D); patches row-major, each
    flattened channel-first then row then column."""
    c, h, w_px = image.shape
    gh, gw = h // patch_size, w_px // patch_size
    tokens = []
    for gy in range(gh):
        for gx in range(gw):
            patch = image[
                :,
                gy * patch_size : (gy + 1) * patch_size,
                gx * patch_size : (gx + 1) * patch_size,
            ]
            tokens.append(patch.reshape(-1) @ w + b)
    return np.stack(tokens, axis=0)


def ref_msa(x_ln, p, num_heads, prefix_k=None, prefix_v=None):
    """Attention for one sequence (T, D). p maps 'w_q', 'b_q', ... to arrays.
    prefix_k/prefix_v are optional (P, D) rows prepended to keys/values of
    every head (sliced to the head's channels)."""
    t, d = x_ln.shape
    hd = d // num_heads
    q = x_ln @ p["w_q"] + p["b_q"]
    k = x_ln @ p["w_k"] + p["b_k"]
    v = x_ln @ p["w_v"] + p["b_v"]
    heads = []
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        if prefix_k is not None:
            kh = np.concatenate([prefix_k[:, sl], kh], axis=0)
            vh = np.concatenate([prefix_v[:, sl], vh], axis=0)
        out = np.empty((t, hd))
        for i in range(t):
            scores = kh @ qh[i] / math.sqrt(hd)
            weights = ref_softmax(scores)
            out[i] = weights @ vh
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p["w_o"] + p["b_o"]


def ref_mlp(x_ln, p):
    return ref_gelu(x_ln @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def ref_block(x, p, num_heads, prefix_k=None, prefix_v=None):
    """Pre-norm transformer block for one (T, D) sequence."""
    h_msa = ref_msa(
        ref_layer_norm(x, p["ln1_g"], p["ln1_b"]), p, num_heads, prefix_k, prefix_v
    )
    x = x + h_msa
    x = x + ref_mlp(ref_layer_norm(x, p["ln2_g"], p["ln2_b"]), p)
    return x


def block_params_from_store(store, index):
    """Pull one block's arrays out of a ParamStore into oracle naming."""
    base = f"block.{index}"
    return {
        "ln1_g": store[f"{base}.ln1.gamma"].data,
        "ln1_b": store[f"{base}.ln1.beta"].data,
        "w_q": store[f"{base}.msa.w_q"].data,
        "b_q": store[f"{base}.msa.b_q"].data,
        "w_k": store[f"{base}.msa.w_k"].data,
        "b_k": store[f"{base}.msa.b_k"].data,
        "w_v": store[f"{base}.msa.w_v"].data,
        "b_v": store[f"{base}.msa.b_v"].data,
        "w_o": store[f"{base}.msa.w_o"].data,
        "b_o": store[f"{base}.msa.b_o"].data,
        "ln2_g": store[f"{base}.ln2.gamma"].data,
        "ln2_b": store[f"{base}.ln2.beta"].data,
        "w1": store[f"{base}.mlp.w1"].data,
        "b1": store[f"{base}.mlp.b1"].data,
        "w2": store[f"{base}.mlp.w2"].data,
        "b2": store[f"{base}.mlp.b2"].data,
    }


def ref_modulation(x, store, index, num_heads, pool="mean"):
    """(key_scale, value_scale) for one (T, D) sequence, recomputed from a
    prefix-free pass of block `index` plus the point-wise convolutions."""
    p = block_params_from_store(store, index)
    d = x.shape[1]
    hd = d // num_heads
    h_msa = ref_msa(ref_layer_norm(x, p["ln1_g"], p["ln1_b"]), p, num_heads)
    pieces = []
    for h in range(num_heads):
        w = store[f"prompt.mod.{index}.head.{h}.w"].data
        b = store[f"prompt.mod.{index}.head.{h}.b"].data
        sl = h_msa[:, h * hd : (h + 1) * hd]
        mapped = np.stack([tok @ w + b for tok in sl], axis=0)
        pieces.append(mapped)
    per_token = np.concatenate(pieces, axis=1)
    key_scale = per_token.mean(axis=0) if pool == "mean" else per_token[0]

    h_mlp = ref_mlp(
        ref_layer_norm(x + h_msa, p["ln2_g"], p["ln2_b"]), p
    )
    gw = store[f"prompt.mod.{index}.gen.w"].data
    gb = store[f"prompt.mod.{index}.gen.b"].data
    mapped = np.stack([tok @ gw + gb for tok in h_mlp], axis=0)
    value_scale = mapped.mean(axis=0) if pool == "mean" else mapped[0]
    return key_scale, value_scale
