"""Miniature vision transformer with slots for prompt tokens and prefixes.

The token sequence is [class token; vision token; language token; patches]
when the two extra prompt tokens are attached, or [class token; patches]
without them. Blocks are pre-norm. Tuned blocks (the first ``tuned_layers``)
may receive per-head key/value prefix rows, which are used directly as
extra attention keys and values without passing through the projections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .optim import ParamStore
from .tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

CLS_INDEX = 0
VIS_INDEX = 1
LANG_INDEX = 2
NUM_VL_TOKENS = 2


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) draws rejected outside two standard deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


@dataclass(frozen=True)
class ViTConfig:
    """Shape of the backbone. image_size may be one int (square) or (h, w)."""

    image_size: int | tuple[int, int] = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 2.0
    prefix_len: int = 1
    tuned_layers: int = 2
    modulation_pool: str = "mean"

    def __post_init__(self):
        h, w = self.image_hw
        if h <= 0 or w <= 0 or self.patch_size <= 0:
            raise ConfigError("image and patch sizes must be positive")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image {h}x{w} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if not 0 <= self.tuned_layers <= self.depth:
            raise ConfigError(
                f"tuned_layers {self.tuned_layers} outside [0, depth={self.depth}]"
            )
        if self.depth < 1 or self.prefix_len < 1 or self.channels < 1:
            raise ConfigError("depth, prefix_len, and channels must be >= 1")
        if self.modulation_pool not in ("mean", "cls"):
            raise ConfigError(f"unknown modulation_pool {self.modulation_pool!r}")

    @property
    def image_hw(self) -> tuple[int, int]:
        if isinstance(self.image_size, tuple):
            return self.image_size
        return (self.image_size, self.image_size)

    @property
    def grid_hw(self) -> tuple[int, int]:
        h, w = self.image_hw
        return (h // self.patch_size, w // self.patch_size)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def token_count(self) -> int:
        """Sequence length with the two prompt tokens attached."""
        return 1 + NUM_VL_TOKENS + self.num_patches

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class ForwardPolicy:
    """Which optional pieces of the forward pass are active."""

    include_vl: bool = True
    use_prefix: bool = True
    use_modulation: bool = True


@dataclass
class ForwardTrace:
    """Intermediate activations kept for diagnostics and modulation tests."""

    block_inputs: list[Tensor] = field(default_factory=list)
    msa_out: dict[int, Tensor] = field(default_factory=dict)
    mlp_out: dict[int, Tensor] = field(default_factory=dict)
    final: Tensor | None = None


@dataclass
class ForwardResult:
    cls: Tensor
    vis: Tensor | None
    lang: Tensor | None
    trace: ForwardTrace


class Backbone:
    """Parameter owner and forward pass of the miniature ViT."""

    def __init__(self, config: ViTConfig, store: ParamStore, rng: np.random.Generator):
        self.config = config
        self.store = store
        d = config.embed_dim
        store.add("patch_embed.w", trunc_normal(rng, (config.patch_dim, d)))
        store.add("patch_embed.b", np.zeros(d))
        store.add("cls_token", trunc_normal(rng, (d,)))
        store.add("pos_embed", trunc_normal(rng, (config.token_count, d)))
        for i in range(config.depth):
            pre = f"block.{i}"
            store.add(f"{pre}.ln1.gamma", np.ones(d))
            store.add(f"{pre}.ln1.beta", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                store.add(f"{pre}.msa.w_{proj}", trunc_normal(rng, (d, d)))
                store.add(f"{pre}.msa.b_{proj}", np.zeros(d))
            store.add(f"{pre}.ln2.gamma", np.ones(d))
            store.add(f"{pre}.ln2.beta", np.zeros(d))
            store.add(f"{pre}.mlp.w1", trunc_normal(rng, (d, config.mlp_dim)))
            store.add(f"{pre}.mlp.b1", np.zeros(config.mlp_dim))
            store.add(f"{pre}.mlp.w2", trunc_normal(rng, (config.mlp_dim, d)))
            store.add(f"{pre}.mlp.b2", np.zeros(d))
        store.add("final_ln.gamma", np.ones(d))
        store.add("final_ln.beta", np.zeros(d))

    # -- parameter access -------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.store[name].tensor

    @staticmethod
    def backbone_param_names(config: ViTConfig) -> list[str]:
        names = ["patch_embed.w", "patch_embed.b", "cls_token", "pos_embed"]
        for i in range(config.depth):
            pre = f"block.{i}"
            names += [f"{pre}.ln1.gamma", f"{pre}.ln1.beta"]
            for proj in ("q", "k", "v", "o"):
                names += [f"{pre}.msa.w_{proj}", f"{pre}.msa.b_{proj}"]
            names += [
                f"{pre}.ln2.gamma",
                f"{pre}.ln2.beta",
                f"{pre}.mlp.w1",
                f"{pre}.mlp.b1",
                f"{pre}.mlp.w2",
                f"{pre}.mlp.b2",
            ]
        names += ["final_ln.gamma", "final_ln.beta"]
        return names

    @staticmethod
    def block_param_names(index: int) -> list[str]:
        pre = f"block.{index}"
        names = [f"{pre}.ln1.gamma", f"{pre}.ln1.beta"]
        for proj in ("q", "k", "v", "o"):
            names += [f"{pre}.msa.w_{proj}", f"{pre}.msa.b_{proj}"]
        names += [
            f"{pre}.ln2.gamma",
            f"{pre}.ln2.beta",
            f"{pre}.mlp.w1",
            f"{pre}.mlp.b1",
            f"{pre}.mlp.w2",
            f"{pre}.mlp.b2",
        ]
        return names

    # -- forward pieces -----------------------------------------------------

    def patch_embed(self, images) -> Tensor:
        """(B, C, H, W) images to (B, num_patches, D) tokens."""
        x = as_tensor(images)
        cfg = self.config
        h, w = cfg.image_hw
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, h, w):
            raise DimensionError(
                f"expected images (B, {cfg.channels}, {h}, {w}), got {x.shape}"
            )
        b = x.shape[0]
        gh, gw = cfg.grid_hw
        p = cfg.patch_size
        x = x.reshape(b, cfg.channels, gh, p, gw, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(b, gh * gw, cfg.patch_dim)
        return matmul(x, self._p("patch_embed.w")) + self._p("patch_embed.b")

    def assemble_sequence(self, patches: Tensor, vl_prompt: Tensor | None) -> Tensor:
        """Prepend the class token (and prompt tokens), add positions.

        Each physical slot keeps its own positional row, so the no-prompt
        sequence uses rows 0 and 3.. of the positional table.
        """
        cfg = self.config
        b = patches.shape[0]
        d = cfg.embed_dim
        cls = broadcast_to(self._p("cls_token").reshape(1, 1, d), (b, 1, d))
        pos = self._p("pos_embed")
        if vl_prompt is not None:
            if vl_prompt.shape != (NUM_VL_TOKENS, d):
                raise DimensionError(
                    f"vl prompt must be ({NUM_VL_TOKENS}, {d}), got {vl_prompt.shape}"
                )
            vl = broadcast_to(vl_prompt.reshape(1, NUM_VL_TOKENS, d), (b, NUM_VL_TOKENS, d))
            seq = concat([cls, vl, patches], axis=1)
        else:
            seq = concat([cls, patches], axis=1)
            pos = concat([pos[0:1], pos[1 + NUM_VL_TOKENS :]], axis=0)
        return seq + pos

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        cfg = self.config
        return x.reshape(b, t, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, nh, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, nh * hd)

    def msa_branch(
        self, x: Tensor, index: int, prefix: tuple[Tensor, Tensor] | None
    ) -> Tensor:
        """Pre-residual self-attention output of one block.

        ``prefix`` is an optional pair of (B, P, D) key and value rows,
        prepended per head after the token projections. Queries remain
        the sequence tokens only.
        """
        pre = f"block.{index}"
        h = layer_norm(x) * self._p(f"{pre}.ln1.gamma") + self._p(f"{pre}.ln1.beta")
        q = matmul(h, self._p(f"{pre}.msa.w_q")) + self._p(f"{pre}.msa.b_q")
        k = matmul(h, self._p(f"{pre}.msa.w_k")) + self._p(f"{pre}.msa.b_k")
        v = matmul(h, self._p(f"{pre}.msa.w_v")) + self._p(f"{pre}.msa.b_v")
        qh = self._split_heads(q)
        kh = self._split_heads(k)
        vh = self._split_heads(v)
        if prefix is not None:
            pk, pv = prefix
            kh = concat([self._split_heads(pk), kh], axis=2)
            vh = concat([self._split_heads(pv), vh], axis=2)
        scale = 1.0 / np.sqrt(self.config.head_dim)
        scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
        attn = softmax(scores, axis=-1)
        out = self._merge_heads(matmul(attn, vh))
        return matmul(out, self._p(f"{pre}.msa.w_o")) + self._p(f"{pre}.msa.b_o")

    def mlp_branch(self, x: Tensor, index: int) -> Tensor:
        """Pre-residual MLP output applied to the post-attention stream."""
        pre = f"block.{index}"
        h = layer_norm(x) * self._p(f"{pre}.ln2.gamma") + self._p(f"{pre}.ln2.beta")
        h = gelu(matmul(h, self._p(f"{pre}.mlp.w1")) + self._p(f"{pre}.mlp.b1"))
        return matmul(h, self._p(f"{pre}.mlp.w2")) + self._p(f"{pre}.mlp.b2")

    def block_forward(
        self, x: Tensor, index: int, prefix: tuple[Tensor, Tensor] | None = None
    ) -> Tensor:
        if not 0 <= index < self.config.depth:
            raise ContractError(f"block index {index} outside depth {self.config.depth}")
        if prefix is not None and index >= self.config.tuned_layers:
            raise ContractError(
                f"prefix given to block {index}, but only the first "
                f"{self.config.tuned_layers} blocks carry prefixes"
            )
        x = x + self.msa_branch(x, index, prefix)
        return x + self.mlp_branch(x, index)

    def final_norm(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self._p("final_ln.gamma") + self._p("final_ln.beta")

    def forward(
        self,
        images,
        prompts=None,
        policy: ForwardPolicy | None = None,
    ) -> ForwardResult:
        """Full pass: patches, sequence assembly, blocks, final norm.

        Returns the class-token feature plus the two prompt-token features
        (None when the prompt tokens are not attached).
        """
        policy = policy or ForwardPolicy()
        x = self.patch_embed(images)
        vl = None
        if policy.include_vl and prompts is not None:
            vl = prompts.vl_tensor()
        x = self.assemble_sequence(x, vl)
        trace = ForwardTrace()
        use_prefix = (
            policy.use_prefix and prompts is not None and prompts.has_prefix
        )
        for i in range(self.config.depth):
            trace.block_inputs.append(x)
            if use_prefix and i < self.config.tuned_layers:
                from .prompts import modulated_block

                x = modulated_block(self, prompts, x, i, policy, trace)
            else:
                x = self.block_forward(x, i, None)
        x = self.final_norm(x)
        trace.final = x
        f_cls = x[:, CLS_INDEX]
        f_vis = x[:, VIS_INDEX] if vl is not None else None
        f_lang = x[:, LANG_INDEX] if vl is not None else None
        return ForwardResult(f_cls, f_vis, f_lang, trace)


# -- checkpoint serialization -------------------------------------------

CHECKPOINT_MAGIC = b"PVLG"
CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Binary weight file: magic, version, then sorted per-name records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(store.names()):
            data = store[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated checkpoint while reading {what}", offset=fh.tell())
    return buf


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a weight file back into name -> array, bit-exactly."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", offset=4)
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ParseError("truncated checkpoint record header", offset=fh.tell())
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dims of {name}"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, count * 8, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


def apply_checkpoint(store: ParamStore, state: dict[str, np.ndarray]) -> None:
    for name, arr in state.items():
        if name not in store:
            raise ConfigError(f"checkpoint parameter {name!r} not in model")
        if store[name].data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint shape mismatch for {name!r}: "
                f"{arr.shape} vs {store[name].data.shape}"
            )
        store[name].data = arr.copy()
