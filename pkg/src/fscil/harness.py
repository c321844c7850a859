"""Experiment orchestration: pretraining, sessions, metrics, diagnostics.

A full run is: pseudo-pretrain the plain backbone on the pretext classes,
train the base session (prompts plus the first tuned blocks), then walk
the few-shot incremental sessions training only the two prompt tokens,
evaluating after every session over all classes seen so far.

Ablation cells are flag bundles over the same machinery; the naive
baseline fine-tunes the whole backbone with plain cross-entropy and no
prompts, which is what makes it forget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone, ForwardPolicy, ViTConfig, trunc_normal
from .errors import ConfigError, StreamValidationError
from .objectives import (
    ClassEmbeddingTable,
    LossBreakdown,
    PrototypeClassifier,
    base_session_loss,
    build_prototypes,
    classification_feature,
    cross_entropy,
    incremental_session_loss,
    prototype_logits,
)
from .optim import AdamState, ParamStore, adam_step, cosine_lr
from .prompts import PREFIX_NAME, PromptState, trainable_set
from .protocol import (
    PRESETS,
    SEED_BACKBONE_INIT,
    SEED_EMBEDDINGS,
    SEED_HEAD_INIT,
    SEED_PROMPT_INIT,
    SEED_TRAIN,
    DatasetBundle,
    FSCILStream,
    generate_synthetic,
    make_stream,
    splitmix64,
    validate_stream,
)
from .report import RunReport, SessionReport
from .tensor import Tensor, no_grad, tmean

_FLAG_FIELDS = (
    "tune_blocks",
    "use_prefix_prompt",
    "use_vl_prompt",
    "use_modulation",
    "use_divergence",
    "use_semantic",
    "finetune_all",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run, data shape through loss weights."""

    preset: str = "cifar-mini"
    seed: int = 1

    # data
    num_classes: int = 56
    samples_per_class: int = 40
    image_size: int = 16
    noise_sigma: float = 0.05
    channels: int = 1
    base_classes: int = 20
    way: int = 5
    shot: int = 5
    num_incremental: int = 4
    eval_per_class: int = 20
    pretext_classes: int = 16

    # backbone
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 2.0
    prefix_len: int = 1
    tuned_layers: int = 2
    modulation_pool: str = "mean"

    # objectives
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.1
    tau: float = 2.0
    proto_scale: float = 10.0
    proto_mode: str = "cosine"
    refresh_base_prototypes: bool = True

    # optimization
    lr: float = 2e-4
    lr_pretrain: float = 2e-3
    batch_size: int = 32
    epochs_pretrain: int = 10
    epochs_base: int = 5
    epochs_incremental: int = 3
    eval_batch_size: int = 256
    fisher_samples: int = 64

    # method flags
    tune_blocks: bool = True
    use_prefix_prompt: bool = True
    use_vl_prompt: bool = True
    use_modulation: bool = True
    use_divergence: bool = True
    use_semantic: bool = True
    finetune_all: bool = False

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        merged = dict(PRESETS[name])
        merged["preset"] = name
        merged.update(overrides)
        return cls(**merged)

    def validate(self) -> None:
        self.vit_config()  # shape checks live there
        if self.use_modulation and not self.use_prefix_prompt:
            raise ConfigError("use_modulation requires use_prefix_prompt")
        if self.use_divergence and not self.use_vl_prompt:
            raise ConfigError("use_divergence requires use_vl_prompt")
        if self.use_semantic and not self.use_vl_prompt:
            raise ConfigError("use_semantic requires use_vl_prompt")
        if self.finetune_all and (self.use_prefix_prompt or self.use_vl_prompt):
            raise ConfigError("finetune_all is the promptless baseline")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lr <= 0 or self.lr_pretrain <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs_base < 1 or self.epochs_incremental < 1 or self.epochs_pretrain < 0:
            raise ConfigError("epoch counts out of range")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.fisher_samples < 0:
            raise ConfigError("fisher_samples must be >= 0")

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.image_size,
            channels=self.channels,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            depth=self.depth,
            mlp_ratio=self.mlp_ratio,
            prefix_len=self.prefix_len,
            tuned_layers=self.tuned_layers,
            modulation_pool=self.modulation_pool,
        )

    def forward_policy(self) -> ForwardPolicy:
        return ForwardPolicy(
            include_vl=self.use_vl_prompt,
            use_prefix=self.use_prefix_prompt,
            use_modulation=self.use_modulation,
        )

    def to_items(self) -> list[tuple[str, str]]:
        items = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            items.append((f.name, text))
        return sorted(items)


ABLATION_CELLS: dict[str, dict[str, bool]] = {
    "baseline-finetune": dict(
        tune_blocks=False,
        use_prefix_prompt=False,
        use_vl_prompt=False,
        use_modulation=False,
        use_divergence=False,
        use_semantic=False,
        finetune_all=True,
    ),
    "prompted": dict(
        tune_blocks=True,
        use_prefix_prompt=True,
        use_vl_prompt=True,
        use_modulation=True,
        use_divergence=False,
        use_semantic=False,
        finetune_all=False,
    ),
    "prompted-div": dict(
        tune_blocks=True,
        use_prefix_prompt=True,
        use_vl_prompt=True,
        use_modulation=True,
        use_divergence=True,
        use_semantic=False,
        finetune_all=False,
    ),
    "prompted-sem": dict(
        tune_blocks=True,
        use_prefix_prompt=True,
        use_vl_prompt=True,
        use_modulation=True,
        use_divergence=False,
        use_semantic=True,
        finetune_all=False,
    ),
    "full": dict(
        tune_blocks=True,
        use_prefix_prompt=True,
        use_vl_prompt=True,
        use_modulation=True,
        use_divergence=True,
        use_semantic=True,
        finetune_all=False,
    ),
}

DEFAULT_SEEDS = (1, 2, 3, 4, 5)


def apply_cell(cfg: ExperimentConfig, cell: str) -> ExperimentConfig:
    if cell not in ABLATION_CELLS:
        raise ConfigError(f"unknown ablation cell {cell!r}; have {sorted(ABLATION_CELLS)}")
    return replace(cfg, **ABLATION_CELLS[cell])


# -- model assembly -----------------------------------------------------------


@dataclass
class ModelParts:
    store: ParamStore
    backbone: Backbone
    prompts: PromptState


def build_model(cfg: ExperimentConfig) -> ModelParts:
    vit = cfg.vit_config()
    store = ParamStore()
    backbone_rng = np.random.Generator(
        np.random.PCG64(splitmix64(cfg.seed, SEED_BACKBONE_INIT))
    )
    backbone = Backbone(vit, store, backbone_rng)
    prompt_rng = np.random.Generator(
        np.random.PCG64(splitmix64(cfg.seed, SEED_PROMPT_INIT))
    )
    prompts = PromptState(
        vit,
        store,
        prompt_rng,
        with_prefix=cfg.use_prefix_prompt,
        with_vl=cfg.use_vl_prompt,
    )
    return ModelParts(store, backbone, prompts)


@dataclass
class SharedAssets:
    """Per-seed data that every ablation cell of that seed can share."""

    bundle: DatasetBundle
    stream: FSCILStream
    embeddings: ClassEmbeddingTable
    pretrained_backbone: dict[str, np.ndarray] | None = None
    pretext_accuracy: float | None = None


def prepare_assets(
    cfg: ExperimentConfig,
    bundle: DatasetBundle | None = None,
    embeddings: ClassEmbeddingTable | None = None,
) -> SharedAssets:
    """Generate (or adopt) the bundle, split the stream, build embeddings."""
    if bundle is None:
        bundle = generate_synthetic(
            num_classes=cfg.num_classes,
            samples_per_class=cfg.samples_per_class,
            image_size=cfg.image_size,
            noise_sigma=cfg.noise_sigma,
            seed=cfg.seed,
            channels=cfg.channels,
        )
    stream = make_stream(
        bundle,
        base_classes=cfg.base_classes,
        way=cfg.way,
        shot=cfg.shot,
        num_incremental=cfg.num_incremental,
        eval_per_class=cfg.eval_per_class,
        pretext_classes=cfg.pretext_classes,
        seed=cfg.seed,
    )
    violations = validate_stream(stream, bundle)
    if violations:
        raise StreamValidationError(violations)
    if embeddings is None:
        all_ids = list(range(bundle.num_classes))
        embeddings = ClassEmbeddingTable.pseudo(
            all_ids,
            [bundle.class_names[c] for c in all_ids],
            dim=cfg.embed_dim,
            seed=splitmix64(cfg.seed, SEED_EMBEDDINGS),
        )
    return SharedAssets(bundle=bundle, stream=stream, embeddings=embeddings)


# -- training internals -------------------------------------------------------


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def trainable_names_for(cfg: ExperimentConfig, parts: ModelParts, kind: str) -> set[str]:
    """Flag-aware freeze policy; the baseline fine-tunes everything always."""
    if cfg.finetune_all:
        return set(Backbone.backbone_param_names(parts.backbone.config))
    names = trainable_set(kind, parts.backbone.config, parts.prompts)
    if kind == "base" and not cfg.tune_blocks:
        for i in range(cfg.tuned_layers):
            names -= set(Backbone.block_param_names(i))
    if kind == "base" and not cfg.use_modulation:
        # scaling convolutions sit idle when modulation is off; leaving
        # them trainable would starve the optimizer of gradients
        names -= set(parts.prompts.modulation_names())
    return names


def _prefix_grad_norm(store: ParamStore) -> float:
    if PREFIX_NAME in store and store[PREFIX_NAME].tensor.grad is not None:
        return float(np.linalg.norm(store[PREFIX_NAME].tensor.grad))
    return 0.0


@dataclass
class PretrainResult:
    accuracy: float
    loss_trace: list[float]


def pseudo_pretrain(
    cfg: ExperimentConfig, parts: ModelParts, bundle: DatasetBundle, stream: FSCILStream
) -> PretrainResult:
    """Supervised stand-in for large-scale pretraining.

    Trains the whole backbone plus a throwaway linear head on the pretext
    classes, on the plain token sequence (no prompt tokens, no prefixes).
    The head is dropped afterwards; prompts are never touched.
    """
    store, backbone = parts.store, parts.backbone
    pretext_ids = sorted(stream.pretext_class_ids)
    if not pretext_ids or cfg.epochs_pretrain == 0:
        return PretrainResult(accuracy=0.0, loss_trace=[])
    label_of = {cid: i for i, cid in enumerate(pretext_ids)}
    idx = stream.pretext_indices
    images = bundle.images[idx]
    labels = np.array([label_of[int(c)] for c in bundle.labels[idx]], dtype=np.int64)

    head_rng = np.random.Generator(np.random.PCG64(splitmix64(cfg.seed, SEED_HEAD_INIT)))
    store.add("pretext_head.w", trunc_normal(head_rng, (cfg.embed_dim, len(pretext_ids))))
    store.add("pretext_head.b", np.zeros(len(pretext_ids)))
    store.apply_policy(trainable_set("pretrain", backbone.config, parts.prompts))

    policy = ForwardPolicy(include_vl=False, use_prefix=False, use_modulation=False)
    rng = np.random.Generator(np.random.PCG64(splitmix64(cfg.seed, SEED_TRAIN, 0)))
    state = AdamState(cfg.lr_pretrain)
    steps_per_epoch = int(np.ceil(images.shape[0] / cfg.batch_size))
    total_steps = cfg.epochs_pretrain * steps_per_epoch
    params = store.parameters()
    trace: list[float] = []
    step = 0
    for _ in range(cfg.epochs_pretrain):
        epoch_losses = []
        for batch in _batches(rng, images.shape[0], cfg.batch_size):
            outs = backbone.forward(images[batch], None, policy)
            logits = (
                outs.cls @ store["pretext_head.w"].tensor + store["pretext_head.b"].tensor
            )
            loss = tmean(cross_entropy(logits, labels[batch]))
            epoch_losses.append(loss.item())
            loss.backward()
            adam_step(params, state, lr=cosine_lr(step, total_steps, cfg.lr_pretrain))
            step += 1
        trace.append(float(np.mean(epoch_losses)))

    correct = 0
    with no_grad():
        for start in range(0, images.shape[0], cfg.eval_batch_size):
            sl = slice(start, start + cfg.eval_batch_size)
            outs = backbone.forward(images[sl], None, policy)
            logits = (
                outs.cls @ store["pretext_head.w"].tensor + store["pretext_head.b"].tensor
            )
            correct += int((np.argmax(logits.data, axis=1) == labels[sl]).sum())
    accuracy = correct / images.shape[0]
    store.remove("pretext_head.w")
    store.remove("pretext_head.b")
    store.zero_grads()
    return PretrainResult(accuracy=accuracy, loss_trace=trace)


def _feature_fn(cfg, parts):
    policy = cfg.forward_policy()

    def fn(images: np.ndarray) -> Tensor:
        return parts.backbone.forward(images, parts.prompts, policy).cls

    return fn


def evaluate(
    cfg: ExperimentConfig,
    parts: ModelParts,
    psi: PrototypeClassifier,
    images: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[int, float]]:
    """Accuracy of the prototype classifier over an evaluation split."""
    policy = cfg.forward_policy()
    predicted = np.empty(labels.shape[0], dtype=np.int64)
    with no_grad():
        for start in range(0, labels.shape[0], cfg.eval_batch_size):
            sl = slice(start, start + cfg.eval_batch_size)
            outs = parts.backbone.forward(images[sl], parts.prompts, policy)
            logits = prototype_logits(psi, classification_feature(outs))
            rows = np.argmax(logits.data, axis=1)
            predicted[sl] = psi.predict_class_ids(rows)
    correct = predicted == labels
    per_class: dict[int, float] = {}
    for cid in sorted(set(int(c) for c in labels)):
        mask = labels == cid
        per_class[cid] = float(correct[mask].mean())
    return float(correct.mean()), per_class


@dataclass
class SessionAudit:
    frozen_ok: bool
    prototypes_ok: bool


def _train_session(
    cfg: ExperimentConfig,
    parts: ModelParts,
    psi: PrototypeClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    session_index: int,
    loss_fn: Callable,
    epochs: int,
    grad_log: list[float] | None,
) -> tuple[list[LossBreakdown], SessionAudit]:
    """Shared gradient loop. Returns per-epoch mean loss breakdowns.

    Audits that parameters outside the trainable set and all existing
    prototype rows are bit-identical across the gradient steps.
    """
    store = parts.store
    trainable = trainable_names_for(
        cfg, parts, "base" if session_index == 0 else "incremental"
    )
    store.apply_policy(trainable)
    frozen_names = [n for n in store.names() if n not in trainable]
    frozen_before = {n: store[n].data.tobytes() for n in frozen_names}
    proto_before = psi.snapshot_bytes()

    policy = cfg.forward_policy()
    trace: list[LossBreakdown] = []
    if trainable and images.shape[0]:
        rng = np.random.Generator(
            np.random.PCG64(splitmix64(cfg.seed, SEED_TRAIN, 1 + session_index))
        )
        state = AdamState(cfg.lr)
        params = store.parameters()
        steps_per_epoch = int(np.ceil(images.shape[0] / cfg.batch_size))
        total_steps = epochs * steps_per_epoch
        step = 0
        for _ in range(epochs):
            epoch: list[LossBreakdown] = []
            for batch in _batches(rng, images.shape[0], cfg.batch_size):
                outs = parts.backbone.forward(images[batch], parts.prompts, policy)
                loss, breakdown = loss_fn(outs, labels[batch])
                epoch.append(breakdown)
                loss.backward()
                if grad_log is not None:
                    grad_log.append(_prefix_grad_norm(store))
                # cosine annealing over the base session; incremental
                # sessions are a handful of steps, where a restarted
                # schedule would mostly just truncate the learning rate
                lr = (
                    cosine_lr(step, total_steps, cfg.lr)
                    if session_index == 0
                    else cfg.lr
                )
                adam_step(params, state, lr=lr)
                step += 1
            trace.append(_mean_breakdown(epoch))
    frozen_ok = all(
        store[n].data.tobytes() == frozen_before[n] for n in frozen_names
    )
    proto_ok = psi.snapshot_bytes() == proto_before
    return trace, SessionAudit(frozen_ok=frozen_ok, prototypes_ok=proto_ok)


def _mean_breakdown(batch: list[LossBreakdown]) -> LossBreakdown:
    def m(name):
        return float(np.mean([getattr(b, name) for b in batch]))

    first = batch[0]
    return LossBreakdown(
        total=m("total"),
        ce_main=m("ce_main"),
        divergence=m("divergence"),
        distill_kl=m("distill_kl"),
        anchor_ce=m("anchor_ce"),
        alpha=first.alpha,
        beta=first.beta,
        gamma=first.gamma,
    )


def run_base_session(
    cfg: ExperimentConfig,
    parts: ModelParts,
    psi: PrototypeClassifier,
    assets: SharedAssets,
    grad_log: list[float] | None = None,
) -> tuple[SessionReport, SessionAudit]:
    """Prototype build, many-sample training, optional refresh, evaluation."""
    t0 = time.perf_counter()
    bundle, stream = assets.bundle, assets.stream
    sess = stream.sessions[0]
    images = bundle.images[sess.train_indices]
    labels = bundle.labels[sess.train_indices].astype(np.int64)

    ids, rows = build_prototypes(_feature_fn(cfg, parts), images, labels, sess.class_ids)
    psi.extend(ids, rows)

    def loss_fn(outs, batch_labels):
        return base_session_loss(
            outs,
            batch_labels,
            psi,
            assets.embeddings,
            alpha=cfg.alpha,
            beta=cfg.beta,
            gamma=cfg.gamma,
            tau=cfg.tau,
            use_divergence=cfg.use_divergence,
            use_semantic=cfg.use_semantic,
        )

    trace, audit = _train_session(
        cfg, parts, psi, images, labels, 0, loss_fn, cfg.epochs_base, grad_log
    )

    if cfg.refresh_base_prototypes:
        # explicit post-training refresh so evaluation sees current features
        ids, rows = build_prototypes(
            _feature_fn(cfg, parts), images, labels, sess.class_ids
        )
        psi.replace(ids, rows)

    eval_idx = stream.eval_cumulative[0]
    accuracy, per_class = evaluate(
        cfg, parts, psi, bundle.images[eval_idx], bundle.labels[eval_idx].astype(np.int64)
    )
    report = SessionReport(
        index=0,
        way=sess.way,
        seen_classes=len(psi),
        accuracy=accuracy,
        per_class=per_class,
        loss_trace=trace,
        wall_time=time.perf_counter() - t0,
    )
    return report, audit


def run_incremental_session(
    cfg: ExperimentConfig,
    parts: ModelParts,
    psi: PrototypeClassifier,
    assets: SharedAssets,
    session_index: int,
) -> tuple[SessionReport, SessionAudit]:
    """Few-shot session: append prototypes, train the prompt tokens, evaluate."""
    t0 = time.perf_counter()
    bundle, stream = assets.bundle, assets.stream
    sess = stream.sessions[session_index]
    images = bundle.images[sess.train_indices]
    labels = bundle.labels[sess.train_indices].astype(np.int64)

    ids, rows = build_prototypes(_feature_fn(cfg, parts), images, labels, sess.class_ids)
    psi.extend(ids, rows)

    def loss_fn(outs, batch_labels):
        return incremental_session_loss(
            outs,
            batch_labels,
            psi,
            assets.embeddings,
            beta=cfg.beta,
            gamma=cfg.gamma,
            tau=cfg.tau,
            use_semantic=cfg.use_semantic,
        )

    trace, audit = _train_session(
        cfg, parts, psi, images, labels, session_index,
        loss_fn, cfg.epochs_incremental, None,
    )

    eval_idx = stream.eval_cumulative[session_index]
    accuracy, per_class = evaluate(
        cfg, parts, psi, bundle.images[eval_idx], bundle.labels[eval_idx].astype(np.int64)
    )
    report = SessionReport(
        index=session_index,
        way=sess.way,
        seen_classes=len(psi),
        accuracy=accuracy,
        per_class=per_class,
        loss_trace=trace,
        wall_time=time.perf_counter() - t0,
    )
    return report, audit


# -- metrics ------------------------------------------------------------------


def session_group_accuracy(
    reports: Sequence[SessionReport], class_session: dict[int, int]
) -> list[list[float]]:
    """acc[t][s]: accuracy at session t on the classes introduced at s."""
    matrix: list[list[float]] = []
    for t, rep in enumerate(reports):
        row = []
        for s in range(t + 1):
            vals = [
                acc
                for cid, acc in rep.per_class.items()
                if class_session[cid] == s
            ]
            row.append(float(np.mean(vals)))
        matrix.append(row)
    return matrix


def compute_metrics(
    reports: Sequence[SessionReport], class_session: dict[int, int]
) -> tuple[float, float, float, float]:
    """(a_base, a_last, a_avg, fgt) over the session reports.

    fgt averages, over every session but the last, the drop from the best
    accuracy that session's classes ever reached to their final accuracy.
    """
    a_base = reports[0].accuracy
    a_last = reports[-1].accuracy
    a_avg = float(np.mean([r.accuracy for r in reports]))
    final = len(reports) - 1
    if final == 0:
        return a_base, a_last, a_avg, 0.0
    acc = session_group_accuracy(reports, class_session)
    drops = []
    for s in range(final):
        best = max(acc[t][s] for t in range(s, final + 1))
        drops.append(best - acc[final][s])
    return a_base, a_last, a_avg, float(np.mean(drops))


# -- diagnostics ---------------------------------------------------------------


def parameter_group(name: str) -> str:
    parts = name.split(".")
    if name.startswith("block."):
        return ".".join(parts[:2])
    if name.startswith("prompt.mod"):
        return "prompt.mod"
    if name.startswith("prompt."):
        return ".".join(parts[:2])
    return parts[0]


def fisher_diagnostic(
    cfg: ExperimentConfig,
    parts: ModelParts,
    psi: PrototypeClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    param_names: Sequence[str],
    max_samples: int | None = None,
) -> dict[str, float]:
    """Empirical diagonal Fisher: per-sample squared gradients of the
    classification cross-entropy, averaged per named parameter group."""
    store = parts.store
    names = list(param_names)
    limit = labels.shape[0] if max_samples is None else min(max_samples, labels.shape[0])
    before = {n: store[n].trainable for n in store.names()}
    store.apply_policy(names)
    policy = cfg.forward_policy()
    accum = {n: np.zeros_like(store[n].data) for n in names}
    try:
        for i in range(limit):
            outs = parts.backbone.forward(images[i : i + 1], parts.prompts, policy)
            logits = prototype_logits(psi, classification_feature(outs))
            rows = psi.labels_to_rows(labels[i : i + 1])
            loss = tmean(cross_entropy(logits, rows))
            loss.backward()
            for n in names:
                g = store[n].tensor.grad
                if g is not None:
                    accum[n] += g * g
            store.zero_grads()
    finally:
        for n, flag in before.items():
            store[n].set_trainable(flag)
    groups: dict[str, list[np.ndarray]] = {}
    for n in names:
        groups.setdefault(parameter_group(n), []).append(accum[n] / max(limit, 1))
    return {
        g: float(np.mean(np.concatenate([a.ravel() for a in arrays])))
        for g, arrays in sorted(groups.items())
    }


# -- full runs ------------------------------------------------------------------


def run_experiment(
    cfg: ExperimentConfig,
    assets: SharedAssets | None = None,
) -> RunReport:
    """One end-to-end run: pretrain, base, incrementals, metrics, diagnostics."""
    cfg.validate()
    if assets is None:
        assets = prepare_assets(cfg)
    parts = build_model(cfg)

    if assets.pretrained_backbone is not None:
        parts.store.restore(assets.pretrained_backbone)
        pretext_accuracy = (
            assets.pretext_accuracy if assets.pretext_accuracy is not None else 0.0
        )
    else:
        pre = pseudo_pretrain(cfg, parts, assets.bundle, assets.stream)
        pretext_accuracy = pre.accuracy

    psi = PrototypeClassifier(cfg.embed_dim, scale=cfg.proto_scale, mode=cfg.proto_mode)
    grad_log: list[float] = []
    reports: list[SessionReport] = []
    audits: list[SessionAudit] = []

    base_report, base_audit = run_base_session(cfg, parts, psi, assets, grad_log)
    reports.append(base_report)
    audits.append(base_audit)
    for t in range(1, assets.stream.num_sessions):
        rep, audit = run_incremental_session(cfg, parts, psi, assets, t)
        reports.append(rep)
        audits.append(audit)

    a_base, a_last, a_avg, fgt = compute_metrics(reports, assets.stream.class_session)

    diagnostics: dict = {
        "prefix_grad_norms": grad_log,
        "pretext_accuracy": pretext_accuracy,
        "freeze_audit": [a.frozen_ok for a in audits],
        "prototype_audit": [a.prototypes_ok for a in audits],
    }
    if cfg.fisher_samples > 0:
        eval_idx = assets.stream.eval_cumulative[-1]
        fisher_names = sorted(trainable_names_for(cfg, parts, "base"))
        diagnostics["fisher"] = fisher_diagnostic(
            cfg,
            parts,
            psi,
            assets.bundle.images[eval_idx],
            assets.bundle.labels[eval_idx].astype(np.int64),
            fisher_names,
            max_samples=cfg.fisher_samples,
        )
    else:
        diagnostics["fisher"] = {}

    return RunReport(
        config=cfg.to_items(),
        sessions=reports,
        a_base=a_base,
        a_last=a_last,
        a_avg=a_avg,
        fgt=fgt,
        diagnostics=diagnostics,
    )


def pretrain_snapshot(cfg: ExperimentConfig, assets: SharedAssets) -> None:
    """Pretrain once and stash the backbone weights in the assets.

    Later runs that share the assets skip pretraining and restore these
    weights instead, which is bit-identical to pretraining again because
    the backbone initialization and the pretraining path do not depend on
    any ablation flag.
    """
    parts = build_model(replace(cfg, **ABLATION_CELLS["baseline-finetune"]))
    pre = pseudo_pretrain(cfg, parts, assets.bundle, assets.stream)
    names = Backbone.backbone_param_names(parts.backbone.config)
    assets.pretrained_backbone = parts.store.snapshot(names)
    assets.pretext_accuracy = pre.accuracy


@dataclass
class AblationRow:
    cell: str
    tuned_layers: int
    seeds: list[int]
    reports: list[RunReport]
    a_base: float
    a_last: float
    a_avg: float
    fgt: float


def run_ablation_suite(
    cfg: ExperimentConfig,
    cells: Sequence[str] | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    sweep_layers: Sequence[int] | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Run the method grid (and optional tuned-layer sweep), median-aggregated.

    All cells of one seed share the dataset, stream, embeddings, and the
    pseudo-pretrained backbone; cells differ only in flags (and in
    tuned_layers for sweep rows).
    """
    cells = list(cells) if cells is not None else list(ABLATION_CELLS)
    grid: list[tuple[str, ExperimentConfig]] = [
        (cell, apply_cell(cfg, cell)) for cell in cells
    ]
    for n in sweep_layers or ():
        if not 0 <= n <= cfg.depth:
            raise ConfigError(f"swept tuned_layers {n} outside [0, {cfg.depth}]")
        grid.append((f"layers-{n}", replace(apply_cell(cfg, "full"), tuned_layers=n)))

    shared: dict[int, SharedAssets] = {}
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        assets = prepare_assets(seed_cfg)
        pretrain_snapshot(seed_cfg, assets)
        shared[seed] = assets

    rows: list[AblationRow] = []
    for name, cell_cfg in grid:
        reports = []
        for seed in seeds:
            run_cfg = replace(cell_cfg, seed=seed)
            if progress:
                progress(f"{name} seed {seed}")
            reports.append(run_experiment(run_cfg, assets=shared[seed]))
        rows.append(
            AblationRow(
                cell=name,
                tuned_layers=cell_cfg.tuned_layers,
                seeds=list(seeds),
                reports=reports,
                a_base=float(np.median([r.a_base for r in reports])),
                a_last=float(np.median([r.a_last for r in reports])),
                a_avg=float(np.median([r.a_avg for r in reports])),
                fgt=float(np.median([r.fgt for r in reports])),
            )
        )
    return rows


def check_ablation_order(rows: list[AblationRow]) -> list[str]:
    """Expected orderings on the median summary; failures come back as text."""
    by_name = {r.cell: r for r in rows}
    problems: list[str] = []
    if {"full", "prompted-sem", "prompted"} <= set(by_name):
        full = by_name["full"].a_avg
        sem = by_name["prompted-sem"].a_avg
        base = by_name["prompted"].a_avg
        if not (full >= sem >= base):
            problems.append(
                f"expected full >= prompted-sem >= prompted on a_avg, "
                f"got {full:.4f}, {sem:.4f}, {base:.4f}"
            )
        if full - base < 0.01:
            problems.append(
                f"expected full to beat prompted by >= 1 point on a_avg, "
                f"gap is {full - base:.4f}"
            )
    sweep = {r.tuned_layers: r for r in rows if r.cell.startswith("layers-")}
    if len(sweep) >= 2 and 2 in sweep:
        for n, row in sweep.items():
            if n != 2 and sweep[2].a_last <= row.a_last:
                problems.append(
                    f"expected layers-2 to beat layers-{n} on a_last, "
                    f"got {sweep[2].a_last:.4f} vs {row.a_last:.4f}"
                )
    return problems
