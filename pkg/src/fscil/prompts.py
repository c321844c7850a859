"""Prompt parameters, prefix modulation, and the per-session freeze policy.

Three prompt groups ride on the backbone:

* a key/value prefix stack, one (2, P, D) pair of row sets per tuned block,
  used directly as extra attention keys and values;
* two extra sequence tokens (a vision token and a language token) whose
  final-layer features feed the auxiliary objectives;
* per-block point-wise convolutions that turn the block's own activations
  into input-conditioned scaling vectors for the prefix rows.

The scaling convolutions start at an exact identity (weights zero, bias
one), so a freshly initialized model behaves as if modulation were absent.
"""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, ForwardPolicy, ForwardTrace, ViTConfig, trunc_normal
from .errors import ConfigError, ContractError
from .optim import ParamStore
from .tensor import Tensor, broadcast_to, concat, matmul, mean_pool

PREFIX_NAME = "prompt.prefix"
VL_NAME = "prompt.vl"


def _mod_head_names(layer: int, head: int) -> tuple[str, str]:
    base = f"prompt.mod.{layer}.head.{head}"
    return f"{base}.w", f"{base}.b"


def _mod_gen_names(layer: int) -> tuple[str, str]:
    base = f"prompt.mod.{layer}.gen"
    return f"{base}.w", f"{base}.b"


class PromptState:
    """Owner of the prompt parameters, registered into the shared store."""

    def __init__(
        self,
        config: ViTConfig,
        store: ParamStore,
        rng: np.random.Generator,
        *,
        with_prefix: bool = True,
        with_vl: bool = True,
    ):
        self.config = config
        self.store = store
        d = config.embed_dim
        hd = config.head_dim
        self.has_prefix = bool(with_prefix and config.tuned_layers > 0)
        self.has_vl = bool(with_vl)
        if self.has_prefix:
            shape = (config.tuned_layers, 2, config.prefix_len, d)
            store.add(PREFIX_NAME, trunc_normal(rng, shape))
            for layer in range(config.tuned_layers):
                for head in range(config.num_heads):
                    w_name, b_name = _mod_head_names(layer, head)
                    store.add(w_name, np.zeros((hd, hd)))
                    store.add(b_name, np.ones(hd))
                w_name, b_name = _mod_gen_names(layer)
                store.add(w_name, np.zeros((d, d)))
                store.add(b_name, np.ones(d))
        if self.has_vl:
            store.add(VL_NAME, trunc_normal(rng, (2, d)))

    def vl_tensor(self) -> Tensor:
        if not self.has_vl:
            raise ContractError("prompt tokens were not created for this model")
        return self.store[VL_NAME].tensor

    def prefix_tensor(self) -> Tensor:
        if not self.has_prefix:
            raise ContractError("prefix prompt was not created for this model")
        return self.store[PREFIX_NAME].tensor

    def param_names(self) -> list[str]:
        names = []
        if self.has_prefix:
            names.append(PREFIX_NAME)
            names.extend(self.modulation_names())
        if self.has_vl:
            names.append(VL_NAME)
        return names

    def modulation_names(self) -> list[str]:
        names: list[str] = []
        if not self.has_prefix:
            return names
        for layer in range(self.config.tuned_layers):
            for head in range(self.config.num_heads):
                names.extend(_mod_head_names(layer, head))
            names.extend(_mod_gen_names(layer))
        return names


def _pool_tokens(x: Tensor, mode: str) -> Tensor:
    # x is (B, T, F); pool the token axis to (B, F)
    if mode == "mean":
        return mean_pool(x, axis=1)
    return x[:, 0]


def compute_modulation(
    backbone: Backbone,
    prompts: PromptState,
    x: Tensor,
    index: int,
    trace: ForwardTrace | None = None,
) -> tuple[Tensor, Tensor]:
    """Input-conditioned scaling vectors for one tuned block.

    Runs the block's own attention on the current tokens without any
    prefix, feeds each head's channel slice through that head's point-wise
    convolution, and pools over tokens to get the key-side vector. The
    post-attention stream then runs the block's MLP, whose pooled
    convolution output gives the value-side vector. Both are (B, D).
    """
    cfg = backbone.config
    if not 0 <= index < cfg.tuned_layers:
        raise ContractError(
            f"modulation asked for block {index}, but only the first "
            f"{cfg.tuned_layers} blocks are tuned"
        )
    hd = cfg.head_dim
    msa = backbone.msa_branch(x, index, None)
    parts = []
    for head in range(cfg.num_heads):
        w_name, b_name = _mod_head_names(index, head)
        sl = msa[:, :, head * hd : (head + 1) * hd]
        conv = matmul(sl, backbone.store[w_name].tensor) + backbone.store[b_name].tensor
        parts.append(_pool_tokens(conv, cfg.modulation_pool))
    key_scale = concat(parts, axis=-1)
    mlp = backbone.mlp_branch(x + msa, index)
    w_name, b_name = _mod_gen_names(index)
    conv = matmul(mlp, backbone.store[w_name].tensor) + backbone.store[b_name].tensor
    value_scale = _pool_tokens(conv, cfg.modulation_pool)
    if trace is not None:
        trace.msa_out[index] = msa
        trace.mlp_out[index] = mlp
    return key_scale, value_scale


def modulate(
    key_rows: Tensor,
    value_rows: Tensor,
    key_scale: Tensor,
    value_scale: Tensor,
) -> tuple[Tensor, Tensor]:
    """Scale prefix rows elementwise: (P, D) rows by (B, D) vectors.

    Returns batched (B, P, D) key and value prefixes.
    """
    if key_rows.shape != value_rows.shape:
        raise ContractError(
            f"key/value row shapes differ: {key_rows.shape} vs {value_rows.shape}"
        )
    b = key_scale.shape[0]
    _, d = key_rows.shape
    pk = key_scale.reshape(b, 1, d) * key_rows
    pv = value_scale.reshape(b, 1, d) * value_rows
    return pk, pv


def modulated_block(
    backbone: Backbone,
    prompts: PromptState,
    x: Tensor,
    index: int,
    policy: ForwardPolicy,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """One tuned block with its scaled key/value prefix attached."""
    rows = prompts.prefix_tensor()[index]
    key_rows, value_rows = rows[0], rows[1]
    b = x.shape[0]
    if policy.use_modulation:
        key_scale, value_scale = compute_modulation(backbone, prompts, x, index, trace)
        pk, pv = modulate(key_rows, value_rows, key_scale, value_scale)
    else:
        p, d = key_rows.shape
        pk = broadcast_to(key_rows.reshape(1, p, d), (b, p, d))
        pv = broadcast_to(value_rows.reshape(1, p, d), (b, p, d))
    return backbone.block_forward(x, index, (pk, pv))


def trainable_set(session_kind: str, config: ViTConfig, prompts: PromptState) -> set[str]:
    """Names of the parameters that train in the given session kind.

    * ``pretrain``: the whole backbone plus the throwaway pretext head.
    * ``base``: the first ``tuned_layers`` blocks, the prefix stack, the
      prompt tokens, and the scaling convolutions.
    * ``incremental``: the two prompt tokens only.
    """
    if session_kind == "pretrain":
        names = set(Backbone.backbone_param_names(config))
        names |= {"pretext_head.w", "pretext_head.b"}
        return names
    if session_kind == "base":
        names: set[str] = set()
        for i in range(config.tuned_layers):
            names |= set(Backbone.block_param_names(i))
        names |= set(prompts.param_names())
        return names
    if session_kind == "incremental":
        if not prompts.has_vl:
            return set()
        return {VL_NAME}
    raise ConfigError(f"unknown session kind {session_kind!r}")
