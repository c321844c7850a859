"""Classifier and loss functions for the incremental protocol.

The classifier is a frozen prototype table: one row per seen class, each
row the mean class-token feature of that class's training samples. Logits
are scaled cosine similarities, so gradients never touch the rows.

Three auxiliary terms shape base-session training:

* a divergence loss that pushes the vision-token and class-token
  predictions apart while both stay correct,
  log((ce_vis + ce_cls) / (kl + eps) + 1);
* a softened distillation loss tying the language-token feature to a
  per-class semantic embedding, tau^2 * KL(softmax(w/tau) || softmax(f/tau));
* an anchor term, plain cross-entropy of the language-token feature under
  the prototype classifier, weighted by gamma inside the distillation loss.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    EPS_KL,
    Tensor,
    as_tensor,
    cross_entropy,
    kl_divergence,
    l2_normalize,
    log,
    matmul,
    no_grad,
    softmax,
    tmean,
)

EMBEDDING_TEMPLATE = "a photo of {}"


class PrototypeClassifier:
    """Frozen per-class feature prototypes with scaled-cosine logits."""

    def __init__(self, dim: int, scale: float = 10.0, mode: str = "cosine"):
        if mode not in ("cosine", "dot"):
            raise ConfigError(f"unknown prototype logit mode {mode!r}")
        self.dim = dim
        self.scale = float(scale)
        self.mode = mode
        self.prototypes = np.zeros((0, dim))
        self.class_ids: list[int] = []
        self._row_of: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.class_ids)

    def extend(self, class_ids: Sequence[int], rows: np.ndarray) -> None:
        """Append rows for new classes. Existing rows are never reordered."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (len(class_ids), self.dim):
            raise DimensionError(
                f"prototype rows {rows.shape} do not match "
                f"({len(class_ids)}, {self.dim})"
            )
        for cid in class_ids:
            if int(cid) in self._row_of:
                raise ConfigError(f"class {int(cid)} already has a prototype")
        for cid in class_ids:
            self._row_of[int(cid)] = len(self.class_ids)
            self.class_ids.append(int(cid))
        self.prototypes = np.concatenate([self.prototypes, rows], axis=0)

    def replace(self, class_ids: Sequence[int], rows: np.ndarray) -> None:
        """Overwrite the rows of already-known classes (post-training refresh)."""
        rows = np.asarray(rows, dtype=np.float64)
        for cid, row in zip(class_ids, rows):
            self.prototypes[self.row_index(int(cid))] = row

    def row_index(self, class_id: int) -> int:
        try:
            return self._row_of[int(class_id)]
        except KeyError:
            raise ContractError(f"class {int(class_id)} has no prototype") from None

    def labels_to_rows(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self.row_index(int(c)) for c in np.asarray(labels)], dtype=np.int64)

    def predict_class_ids(self, rows: np.ndarray) -> np.ndarray:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        return ids[rows]

    def snapshot_bytes(self) -> bytes:
        return self.prototypes.tobytes()


def prototype_logits(psi: PrototypeClassifier, features: Tensor) -> Tensor:
    """(B, D) features to (B, K) logits against the frozen rows."""
    if len(psi) == 0:
        raise ContractError("prototype classifier has no rows yet")
    if features.shape[-1] != psi.dim:
        raise DimensionError(
            f"feature dim {features.shape[-1]} does not match prototypes {psi.dim}"
        )
    rows = Tensor(psi.prototypes)  # constant: no gradient can reach the rows
    if psi.mode == "cosine":
        f = l2_normalize(features)
        r = l2_normalize(rows)
    else:
        f, r = features, rows
    return matmul(f, r.transpose(1, 0)) * psi.scale


def build_prototypes(
    feature_fn: Callable[[np.ndarray], Tensor],
    images: np.ndarray,
    labels: np.ndarray,
    class_ids: Sequence[int],
    batch_size: int = 128,
) -> tuple[list[int], np.ndarray]:
    """Mean class-token feature per class, in ascending class-id order.

    ``feature_fn`` maps an image batch to (B, D) features; it runs under
    no_grad, so prototype construction never builds a graph.
    """
    ordered = sorted(int(c) for c in class_ids)
    labels = np.asarray(labels)
    rows = []
    with no_grad():
        for cid in ordered:
            idx = np.flatnonzero(labels == cid)
            if idx.size == 0:
                raise ConfigError(f"no samples for class {cid} when building prototypes")
            total = None
            for start in range(0, idx.size, batch_size):
                feats = feature_fn(images[idx[start : start + batch_size]]).data
                chunk = feats.sum(axis=0)
                total = chunk if total is None else total + chunk
            rows.append(total / idx.size)
    return ordered, np.stack(rows, axis=0)


# -- semantic embeddings --------------------------------------------------


class ClassEmbeddingTable:
    """Per-class semantic target vectors for the language token."""

    def __init__(self, dim: int):
        self.dim = dim
        self.vectors: dict[int, np.ndarray] = {}
        self.names: dict[int, str] = {}

    def add(self, class_id: int, name: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimensionError(
                f"embedding for class {class_id} has shape {vector.shape}, "
                f"expected ({self.dim},)"
            )
        if class_id in self.vectors:
            raise ConfigError(f"class {class_id} already has an embedding")
        self.vectors[int(class_id)] = vector
        self.names[int(class_id)] = name

    def vector_for(self, class_id: int) -> np.ndarray:
        try:
            return self.vectors[int(class_id)]
        except KeyError:
            raise ContractError(f"no embedding for class {int(class_id)}") from None

    def matrix_for(self, labels: np.ndarray) -> np.ndarray:
        return np.stack([self.vector_for(int(c)) for c in np.asarray(labels)], axis=0)

    @classmethod
    def pseudo(
        cls,
        class_ids: Sequence[int],
        names: Sequence[str],
        dim: int,
        seed: int,
    ) -> "ClassEmbeddingTable":
        """Deterministic stand-in embeddings from hashed prompt strings.

        Each class name is wrapped in a fixed context template, hashed
        together with the seed, and the hash seeds a Gaussian draw that is
        normalized to length sqrt(dim).
        """
        table = cls(dim)
        for cid, name in zip(class_ids, names):
            prompt = EMBEDDING_TEMPLATE.format(name)
            digest = hashlib.sha256(
                prompt.encode("utf-8") + seed.to_bytes(8, "little", signed=False)
            ).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
            vec = rng.standard_normal(dim)
            vec = vec / max(np.linalg.norm(vec), 1e-12) * np.sqrt(dim)
            table.add(int(cid), name, vec)
        return table

    def save(self, path: str) -> None:
        """One line per class: class_id,<name>,v_1,...,v_D."""
        with open(path, "w", encoding="utf-8") as fh:
            for cid in sorted(self.vectors):
                values = ",".join(repr(float(v)) for v in self.vectors[cid])
                fh.write(f"{cid},{self.names[cid]},{values}\n")

    @classmethod
    def load(cls, path: str, expect_dim: int | None = None) -> "ClassEmbeddingTable":
        rows: list[tuple[int, str, np.ndarray]] = []
        dim = expect_dim
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) < 3:
                    raise ConfigError(f"{path}:{lineno}: malformed embedding row")
                cid = int(parts[0])
                name = parts[1]
                vec = np.array([float(v) for v in parts[2:]], dtype=np.float64)
                if dim is None:
                    dim = vec.size
                if vec.size != dim:
                    raise ConfigError(
                        f"{path}:{lineno}: embedding dim {vec.size}, expected {dim}"
                    )
                rows.append((cid, name, vec))
        if dim is None:
            raise ConfigError(f"{path}: empty embedding table")
        table = cls(dim)
        for cid, name, vec in rows:
            table.add(cid, name, vec)
        return table


# -- losses ------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Scalar components of one loss evaluation (batch means)."""

    total: float
    ce_main: float
    divergence: float
    distill_kl: float
    anchor_ce: float
    alpha: float
    beta: float
    gamma: float

    def weighted_sum(self) -> float:
        return (
            self.ce_main
            + self.alpha * self.divergence
            + self.beta * (self.distill_kl + self.gamma * self.anchor_ce)
        )


def entropy_divergence_loss(
    vis_logits: Tensor,
    cls_logits: Tensor,
    row_labels: np.ndarray,
    eps: float = EPS_KL,
) -> Tensor:
    """log((ce_vis + ce_cls) / (kl + eps) + 1), averaged over the batch.

    ``kl`` compares the two predicted distributions, so the loss rewards
    predictions that are both correct and mutually distinct. The eps floor
    keeps the ratio finite when the distributions coincide.
    """
    if vis_logits.shape != cls_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {vis_logits.shape} vs {cls_logits.shape}"
        )
    ce_v = cross_entropy(vis_logits, row_labels)
    ce_c = cross_entropy(cls_logits, row_labels)
    kl = kl_divergence(softmax(vis_logits), softmax(cls_logits))
    ratio = (ce_v + ce_c) / (kl + eps)
    per_sample = log(ratio + 1.0)
    return tmean(per_sample)


def distillation_loss(f_lang: Tensor, targets: np.ndarray, tau: float = 2.0) -> Tensor:
    """Softened KL from the semantic targets to the language-token features.

    Both sides are treated as logit vectors at temperature tau; the usual
    tau^2 factor keeps gradient scale roughly temperature-independent.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    w = as_tensor(np.asarray(targets, dtype=np.float64))
    if w.shape != f_lang.shape:
        raise DimensionError(f"target shape {w.shape} != feature shape {f_lang.shape}")
    teacher = softmax(w * (1.0 / tau))
    student = softmax(f_lang * (1.0 / tau))
    return tmean(kl_divergence(teacher, student)) * (tau * tau)


def semantic_distillation_loss(
    f_lang: Tensor,
    targets: np.ndarray,
    psi: PrototypeClassifier,
    row_labels: np.ndarray,
    gamma: float = 0.1,
    tau: float = 2.0,
) -> tuple[Tensor, Tensor, Tensor]:
    """Distillation plus a gamma-weighted classification anchor.

    Returns (total, kl_part, anchor_ce_part); the parts are kept for the
    loss breakdown.
    """
    kl_part = distillation_loss(f_lang, targets, tau)
    anchor = tmean(cross_entropy(prototype_logits(psi, f_lang), row_labels))
    return kl_part + anchor * gamma, kl_part, anchor


def _main_feature(outs) -> Tensor:
    if outs.vis is not None:
        return (outs.cls + outs.vis) * 0.5
    return outs.cls


def classification_feature(outs) -> Tensor:
    """Feature the classifier sees: mean of class and vision tokens."""
    return _main_feature(outs)


def base_session_loss(
    outs,
    labels: np.ndarray,
    psi: PrototypeClassifier,
    embeddings: ClassEmbeddingTable | None,
    *,
    alpha: float = 0.5,
    beta: float = 0.5,
    gamma: float = 0.1,
    tau: float = 2.0,
    use_divergence: bool = True,
    use_semantic: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Full training objective for the base session.

    total = ce_main + alpha * divergence + beta * (distill_kl + gamma * anchor_ce)

    The divergence term needs the vision token and the semantic term needs
    the language token; both require the prompt tokens to be attached.
    """
    rows = psi.labels_to_rows(labels)
    y_main = prototype_logits(psi, _main_feature(outs))
    total = tmean(cross_entropy(y_main, rows))
    ce_main = total.item()
    div_val = 0.0
    kl_val = 0.0
    anchor_val = 0.0
    if use_divergence and alpha != 0.0:
        if outs.vis is None:
            raise ContractError("divergence loss needs the vision token")
        div = entropy_divergence_loss(
            prototype_logits(psi, outs.vis),
            prototype_logits(psi, outs.cls),
            rows,
        )
        div_val = div.item()
        total = total + div * alpha
    if use_semantic and beta != 0.0:
        if outs.lang is None:
            raise ContractError("semantic distillation needs the language token")
        if embeddings is None:
            raise ContractError("semantic distillation needs the embedding table")
        targets = embeddings.matrix_for(labels)
        skd, kl_part, anchor = semantic_distillation_loss(
            outs.lang, targets, psi, rows, gamma=gamma, tau=tau
        )
        kl_val = kl_part.item()
        anchor_val = anchor.item()
        total = total + skd * beta
    breakdown = LossBreakdown(
        total=total.item(),
        ce_main=ce_main,
        divergence=div_val,
        distill_kl=kl_val,
        anchor_ce=anchor_val,
        alpha=alpha if (use_divergence and alpha != 0.0) else 0.0,
        beta=beta if (use_semantic and beta != 0.0) else 0.0,
        gamma=gamma,
    )
    return total, breakdown


def incremental_session_loss(
    outs,
    labels: np.ndarray,
    psi: PrototypeClassifier,
    embeddings: ClassEmbeddingTable | None,
    *,
    beta: float = 0.5,
    gamma: float = 0.1,
    tau: float = 2.0,
    use_semantic: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Incremental objective: classification plus semantic distillation.

    The divergence term is dropped entirely, so its reported component is
    exactly zero.
    """
    return base_session_loss(
        outs,
        labels,
        psi,
        embeddings,
        alpha=0.0,
        beta=beta,
        gamma=gamma,
        tau=tau,
        use_divergence=False,
        use_semantic=use_semantic,
    )
