"""Finite-difference verification of every analytic gradient.

Primitives are checked one op at a time against central differences on a
random scalar projection. Composites run the real losses through a tiny
two-block model and differentiate with respect to every parameter the
corresponding session would train, modulation convolutions included.

A named fault can be injected to prove the checker is alive: the analytic
gradient of that one check is perturbed and the suite must then fail,
naming the op it disagrees with.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone, ForwardPolicy, ViTConfig
from .objectives import (
    ClassEmbeddingTable,
    PrototypeClassifier,
    base_session_loss,
    distillation_loss,
    entropy_divergence_loss,
    incremental_session_loss,
)
from .optim import ParamStore
from .prompts import PromptState, trainable_set
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    gelu,
    kl_divergence,
    l2_normalize,
    layer_norm,
    log,
    no_grad,
    softmax,
    tmean,
    tsum,
)

FD_STEP = 1e-5
TOL_PRIMITIVE = 1e-6
TOL_COMPOSITE = 1e-4


@dataclass
class CheckResult:
    name: str
    kind: str  # "primitive" or "composite"
    max_rel_err: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status:4s} {self.kind:9s} {self.name:24s} "
            f"max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.0e}"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(x)
        flat[i] = keep - h
        lo = f(x)
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def _check_op(
    name: str,
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    tol: float,
    fault: str | None,
) -> CheckResult:
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = tensors[k].grad.copy()
        if fault == name:
            analytic = analytic + 1.0

        def scalar(v: np.ndarray, _k=k) -> float:
            args = [
                Tensor(v if j == _k else a.copy())
                for j, a in enumerate(arrays)
            ]
            with no_grad():
                return fn(*args).item()

        numeric = central_difference(scalar, base.copy())
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, "primitive", worst, tol, worst < tol)


def primitive_checks(
    rng: np.random.Generator, tol: float, fault: str | None
) -> list[CheckResult]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep away from division poles
    c = rng.normal(size=(4, 5))
    r34 = rng.normal(size=(3, 4))
    r35 = rng.normal(size=(3, 5))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    logits = rng.normal(size=(4, 6))
    labels = np.array([0, 2, 5, 1])
    p = np.exp(rng.normal(size=(3, 4)))
    p /= p.sum(axis=1, keepdims=True)
    q = np.exp(rng.normal(size=(3, 4)))
    q /= q.sum(axis=1, keepdims=True)

    cases: list[tuple[str, Callable[..., Tensor], tuple[np.ndarray, ...]]] = [
        ("add", lambda x, y: tsum((x + y) * Tensor(r34)), (a, b)),
        ("mul", lambda x, y: tsum(x * y * Tensor(r34)), (a, b)),
        ("div", lambda x, y: tsum((x / y) * Tensor(r34)), (a, b)),
        ("matmul", lambda x, y: tsum((x @ y) * Tensor(r35)), (a, c)),
        ("log", lambda x: tsum(log(x) * Tensor(r34)), (pos,)),
        ("reshape", lambda x: tsum(x.reshape(2, 6) * Tensor(r34.reshape(2, 6))), (a,)),
        ("transpose", lambda x: tsum(x.transpose(1, 0) * Tensor(r34.T)), (a,)),
        ("getitem", lambda x: tsum(x[1:3, :2] * Tensor(r34[1:3, :2])), (a,)),
        ("concat", lambda x, y: tsum(concat([x, y], axis=1) * Tensor(np.hstack([r34, r34]))), (a, b)),
        ("sum", lambda x: tsum(tsum(x, axis=0) * Tensor(r34[0])), (a,)),
        ("mean", lambda x: tsum(tmean(x, axis=1) * Tensor(r34[:, 0])), (a,)),
        ("softmax", lambda x: tsum(softmax(x) * Tensor(r34)), (a,)),
        ("layer_norm", lambda x: tsum(layer_norm(x) * Tensor(r34)), (a,)),
        ("gelu", lambda x: tsum(gelu(x) * Tensor(r34)), (a,)),
        ("l2_normalize", lambda x: tsum(l2_normalize(x) * Tensor(r34)), (a,)),
        ("kl_divergence", lambda x, y: tsum(kl_divergence(x, y)), (p, q)),
        ("cross_entropy", lambda x: tmean(cross_entropy(x, labels)), (logits,)),
        (
            "entropy_divergence",
            lambda x, y: entropy_divergence_loss(x, y, labels[:3]),
            (rng.normal(size=(3, 6)), rng.normal(size=(3, 6))),
        ),
        (
            "distillation",
            lambda x, _targets=rng.normal(size=(3, 4)): distillation_loss(
                x, _targets, tau=2.0
            ),
            (rng.normal(size=(3, 4)),),
        ),
    ]
    return [_check_op(name, fn, arrays, tol, fault) for name, fn, arrays in cases]


# -- composite checks through a tiny model ------------------------------------


@dataclass
class TinyModel:
    config: ViTConfig
    store: ParamStore
    backbone: Backbone
    prompts: PromptState
    psi: PrototypeClassifier
    embeddings: ClassEmbeddingTable
    images: np.ndarray
    labels: np.ndarray


def build_tiny_model(seed: int = 0) -> TinyModel:
    """Two blocks, two heads, two patches: smallest model with a real
    attention mixing pattern and a tuned/frozen block split."""
    config = ViTConfig(
        image_size=(4, 8),
        channels=1,
        patch_size=4,
        embed_dim=8,
        num_heads=2,
        depth=2,
        mlp_ratio=2.0,
        prefix_len=1,
        tuned_layers=1,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    backbone = Backbone(config, store, rng)
    prompts = PromptState(config, store, rng)
    class_ids = [0, 1, 2]
    protos = rng.normal(size=(3, config.embed_dim))
    psi = PrototypeClassifier(config.embed_dim)
    psi.extend(class_ids, protos)
    embeddings = ClassEmbeddingTable.pseudo(
        class_ids, [f"tiny_{c}" for c in class_ids], dim=config.embed_dim, seed=seed
    )
    images = rng.uniform(size=(2, 1, 4, 8))
    labels = np.array([0, 2], dtype=np.int64)
    return TinyModel(config, store, backbone, prompts, psi, embeddings, images, labels)


def _check_params(
    name: str,
    model: TinyModel,
    loss_fn: Callable[[], Tensor],
    param_names: Sequence[str],
    tol: float,
    fault: str | None,
) -> CheckResult:
    store = model.store
    store.apply_policy(param_names)
    store.zero_grads()
    loss_fn().backward()
    worst = 0.0
    for pname in param_names:
        grad = store[pname].tensor.grad
        analytic = np.zeros_like(store[pname].data) if grad is None else grad.copy()
        if fault == name:
            analytic = analytic + 1.0
        data = store[pname].data
        flat = data.ravel()
        numeric = np.zeros_like(analytic)
        num_flat = numeric.ravel()
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + FD_STEP
                hi = loss_fn().item()
                flat[i] = keep - FD_STEP
                lo = loss_fn().item()
                flat[i] = keep
                num_flat[i] = (hi - lo) / (2.0 * FD_STEP)
        worst = max(worst, relative_error(analytic, numeric))
    store.zero_grads()
    return CheckResult(name, "composite", worst, tol, worst < tol)


def composite_checks(tol: float, fault: str | None, seed: int = 0) -> list[CheckResult]:
    model = build_tiny_model(seed)
    policy = ForwardPolicy(include_vl=True, use_prefix=True, use_modulation=True)

    def forward():
        return model.backbone.forward(model.images, model.prompts, policy)

    def base_loss():
        outs = forward()
        loss, _ = base_session_loss(
            outs, model.labels, model.psi, model.embeddings,
            alpha=0.5, beta=0.5, gamma=0.1, tau=2.0,
        )
        return loss

    def incremental_loss():
        outs = forward()
        loss, _ = incremental_session_loss(
            outs, model.labels, model.psi, model.embeddings,
            beta=0.5, gamma=0.1, tau=2.0,
        )
        return loss

    base_names = sorted(trainable_set("base", model.config, model.prompts))
    vl_names = sorted(trainable_set("incremental", model.config, model.prompts))
    modulation_names = sorted(model.prompts.modulation_names())
    return [
        _check_params("base_loss/session_params", model, base_loss, base_names, tol, fault),
        _check_params("base_loss/modulation", model, base_loss, modulation_names, tol, fault),
        _check_params("incremental_loss/vl", model, incremental_loss, vl_names, tol, fault),
    ]


def run_full_suite(
    seed: int = 0,
    tol_primitive: float = TOL_PRIMITIVE,
    tol_composite: float = TOL_COMPOSITE,
    fault: str | None = None,
) -> tuple[list[CheckResult], bool]:
    rng = np.random.Generator(np.random.PCG64(seed))
    results = primitive_checks(rng, tol_primitive, fault)
    results.extend(composite_checks(tol_composite, fault, seed=seed))
    return results, all(r.passed for r in results)
