"""Synthetic dataset generation, session streams, and the dataset file format.

Each class is a fixed oriented sinusoidal grating whose frequency, phase,
and orientation are drawn from a per-class seeded generator; samples add
i.i.d. Gaussian pixel noise and clamp to [0, 1]. Per-class seeds are mixed
from the master seed with a splitmix step, so generating classes in any
order (or in parallel) yields bit-identical data.

A stream splits the generated classes into one many-sample base session,
several disjoint few-shot incremental sessions, and a held-out pretext
class set used only for pseudo-pretraining.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, ParseError

_MASK64 = (1 << 64) - 1


def splitmix64(*values: int) -> int:
    """Mix any number of integers into one well-scrambled 64-bit seed."""
    z = 0
    for v in values:
        z = (z + (int(v) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z = z ^ (z >> 31)
    return z


# tags keep the derived seed streams for different purposes independent
SEED_CLASS_PATTERN = 1
SEED_CLASS_NOISE = 2
SEED_STREAM = 3
SEED_EMBEDDINGS = 4
SEED_BACKBONE_INIT = 5
SEED_PROMPT_INIT = 6
SEED_TRAIN = 7
SEED_HEAD_INIT = 8


@dataclass
class DatasetBundle:
    """Images (N, C, H, W) float64 in [0, 1], labels, and class names."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError("labels must be one per image")


def _class_pattern(
    class_id: int, image_hw: tuple[int, int], seed: int
) -> np.ndarray:
    rng = np.random.Generator(
        np.random.PCG64(splitmix64(seed, SEED_CLASS_PATTERN, class_id))
    )
    # frequency stays under two cycles: higher-frequency gratings alias into
    # trivially separable patch signatures and incremental sessions stop
    # interfering with earlier classes at all
    freq = 1.0 + rng.random()
    theta = np.pi * rng.random()
    phase = 2.0 * np.pi * rng.random()
    h, w = image_hw
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    coord = u * np.cos(theta) + v * np.sin(theta)
    return 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * coord + phase)


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    image_size: int = 16,
    noise_sigma: float = 0.05,
    seed: int = 0,
    channels: int = 1,
) -> DatasetBundle:
    """Build the full class-major bundle for one master seed."""
    if num_classes < 1 or samples_per_class < 1:
        raise ConfigError("need at least one class and one sample per class")
    if image_size < 2:
        raise ConfigError(f"image_size {image_size} too small for a grating")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if channels < 1:
        raise ConfigError("channels must be >= 1")
    hw = (image_size, image_size)
    images = np.empty(
        (num_classes * samples_per_class, channels, image_size, image_size)
    )
    labels = np.empty(num_classes * samples_per_class, dtype=np.uint32)
    for cid in range(num_classes):
        pattern = _class_pattern(cid, hw, seed)
        noise_rng = np.random.Generator(
            np.random.PCG64(splitmix64(seed, SEED_CLASS_NOISE, cid))
        )
        start = cid * samples_per_class
        for i in range(samples_per_class):
            sample = pattern + noise_rng.normal(
                0.0, noise_sigma, size=hw
            ) if noise_sigma > 0 else pattern.copy()
            images[start + i] = np.clip(sample, 0.0, 1.0)
        labels[start : start + samples_per_class] = cid
    names = [f"class_{cid:03d}" for cid in range(num_classes)]
    return DatasetBundle(images=images, labels=labels, class_names=names)


# -- session streams ----------------------------------------------------


@dataclass
class SessionSplit:
    """One session: its classes and the training samples it may touch."""

    index: int
    class_ids: tuple[int, ...]
    train_indices: np.ndarray
    way: int
    shot: int | None  # None for the base session


@dataclass
class FSCILStream:
    sessions: list[SessionSplit]
    eval_cumulative: list[np.ndarray]  # eval indices over all seen classes
    pretext_class_ids: tuple[int, ...]
    pretext_indices: np.ndarray
    class_session: dict[int, int] = field(default_factory=dict)

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def seen_class_ids(self, upto: int) -> set[int]:
        seen: set[int] = set()
        for s in self.sessions[: upto + 1]:
            seen |= set(s.class_ids)
        return seen


def make_stream(
    bundle: DatasetBundle,
    base_classes: int,
    way: int,
    shot: int,
    num_incremental: int,
    eval_per_class: int,
    pretext_classes: int,
    seed: int = 0,
) -> FSCILStream:
    """Deterministically split bundle classes into sessions and pretext.

    Classes are assigned by one seeded shuffle; each class's samples are
    shuffled once, the first ``eval_per_class`` becoming its evaluation
    split and the remainder its training pool. Incremental sessions take
    exactly ``shot`` training samples per class.
    """
    needed = base_classes + way * num_incremental + pretext_classes
    if needed > bundle.num_classes:
        raise ConfigError(
            f"stream needs {needed} classes "
            f"(base {base_classes} + {num_incremental}x{way}-way + "
            f"pretext {pretext_classes}), bundle has {bundle.num_classes}"
        )
    if min(base_classes, way, shot, num_incremental, eval_per_class) < 1:
        raise ConfigError("stream shape parameters must all be >= 1")
    rng = np.random.Generator(np.random.PCG64(splitmix64(seed, SEED_STREAM)))
    order = rng.permutation(bundle.num_classes)

    cursor = 0
    session_classes: list[tuple[int, ...]] = []
    session_classes.append(tuple(int(c) for c in order[:base_classes]))
    cursor = base_classes
    for _ in range(num_incremental):
        session_classes.append(tuple(int(c) for c in order[cursor : cursor + way]))
        cursor += way
    pretext_ids = tuple(int(c) for c in order[cursor : cursor + pretext_classes])

    eval_idx: dict[int, np.ndarray] = {}
    pool_idx: dict[int, np.ndarray] = {}
    for cid in [c for cs in session_classes for c in cs]:
        samples = np.flatnonzero(bundle.labels == cid)
        if samples.size <= eval_per_class:
            raise ConfigError(
                f"class {cid} has {samples.size} samples, needs more than "
                f"eval_per_class={eval_per_class}"
            )
        shuffled = samples[
            np.random.Generator(
                np.random.PCG64(splitmix64(seed, SEED_STREAM, cid))
            ).permutation(samples.size)
        ]
        eval_idx[cid] = shuffled[:eval_per_class]
        pool_idx[cid] = shuffled[eval_per_class:]

    sessions: list[SessionSplit] = []
    class_session: dict[int, int] = {}
    for t, cls_ids in enumerate(session_classes):
        if t == 0:
            train = np.concatenate([pool_idx[c] for c in cls_ids])
            sessions.append(
                SessionSplit(0, cls_ids, train, way=len(cls_ids), shot=None)
            )
        else:
            for c in cls_ids:
                if pool_idx[c].size < shot:
                    raise ConfigError(
                        f"class {c} has {pool_idx[c].size} training samples, "
                        f"needs shot={shot}"
                    )
            train = np.concatenate([pool_idx[c][:shot] for c in cls_ids])
            sessions.append(SessionSplit(t, cls_ids, train, way=len(cls_ids), shot=shot))
        for c in cls_ids:
            class_session[c] = t

    eval_cumulative: list[np.ndarray] = []
    acc: list[np.ndarray] = []
    for s in sessions:
        acc.extend(eval_idx[c] for c in s.class_ids)
        eval_cumulative.append(np.concatenate(acc))

    pretext_indices = (
        np.concatenate([np.flatnonzero(bundle.labels == c) for c in pretext_ids])
        if pretext_ids
        else np.array([], dtype=np.int64)
    )
    return FSCILStream(
        sessions=sessions,
        eval_cumulative=eval_cumulative,
        pretext_class_ids=pretext_ids,
        pretext_indices=pretext_indices,
        class_session=class_session,
    )


def validate_stream(stream: FSCILStream, bundle: DatasetBundle) -> list[str]:
    """Check the protocol invariants; violations come back as messages."""
    violations: list[str] = []
    seen: dict[int, int] = {}
    for s in stream.sessions:
        for c in s.class_ids:
            if c in seen:
                violations.append(
                    f"class {c} appears in sessions {seen[c]} and {s.index}"
                )
            else:
                seen[c] = s.index
    for c in stream.pretext_class_ids:
        if c in seen:
            violations.append(f"pretext class {c} also appears in session {seen[c]}")

    for s in stream.sessions:
        labels = bundle.labels[s.train_indices]
        extraneous = set(int(v) for v in labels) - set(s.class_ids)
        if extraneous:
            violations.append(
                f"session {s.index} training data contains foreign classes "
                f"{sorted(extraneous)}"
            )
        if s.index == 0:
            if s.train_indices.size == 0:
                violations.append("base session has no training samples")
            continue
        expected = s.shot * s.way
        if s.train_indices.size != expected:
            violations.append(
                f"session {s.index} has {s.train_indices.size} samples, "
                f"expected shot*way = {expected}"
            )
        for c in s.class_ids:
            count = int((labels == c).sum())
            if count != s.shot:
                violations.append(
                    f"session {s.index} class {c} has {count} samples, "
                    f"expected shot = {s.shot}"
                )

    for t, eval_idx in enumerate(stream.eval_cumulative):
        should = stream.seen_class_ids(t)
        have = set(int(v) for v in bundle.labels[eval_idx])
        missing = should - have
        extra = have - should
        if missing:
            violations.append(
                f"evaluation at session {t} misses classes {sorted(missing)}"
            )
        if extra:
            violations.append(
                f"evaluation at session {t} includes unseen classes {sorted(extra)}"
            )
    return violations


# -- presets ------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "cifar-mini": dict(
        num_classes=56,
        samples_per_class=40,
        image_size=16,
        noise_sigma=0.05,
        channels=1,
        base_classes=20,
        way=5,
        shot=5,
        num_incremental=4,
        eval_per_class=20,
        pretext_classes=16,
    ),
    "cub-mini": dict(
        num_classes=56,
        samples_per_class=40,
        image_size=16,
        noise_sigma=0.05,
        channels=1,
        base_classes=20,
        way=4,
        shot=3,
        num_incremental=5,
        eval_per_class=20,
        pretext_classes=16,
    ),
}


# -- dataset file format --------------------------------------------------

DATASET_MAGIC = b"PVDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetHeader:
    num_samples: int
    num_classes: int
    channels: int
    height: int
    width: int
    class_names: tuple[str, ...]


def save_dataset(bundle: DatasetBundle, path: str) -> None:
    n, ch, h, w = bundle.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<5I", n, bundle.num_classes, ch, h, w))
        for name in bundle.class_names:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        fh.write(bundle.labels.astype("<u4", copy=False).tobytes(order="C"))
        fh.write(bundle.images.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated dataset while reading {what}", offset=fh.tell())
    return buf


def _read_header(fh: BinaryIO) -> DatasetHeader:
    magic = fh.read(len(DATASET_MAGIC))
    if magic != DATASET_MAGIC:
        raise ParseError(f"bad dataset magic {magic!r}", offset=0)
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {version}", offset=4)
    n, c, ch, h, w = struct.unpack("<5I", _read_exact(fh, 20, "counts"))
    names = []
    for i in range(c):
        (length,) = struct.unpack("<I", _read_exact(fh, 4, f"name length {i}"))
        names.append(_read_exact(fh, length, f"name {i}").decode("utf-8"))
    return DatasetHeader(n, c, ch, h, w, tuple(names))


def inspect_dataset(path: str) -> DatasetHeader:
    """Header-only read: counts and names, payload untouched."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_dataset(path: str) -> DatasetBundle:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        labels = np.frombuffer(
            _read_exact(fh, header.num_samples * 4, "labels"), dtype="<u4"
        ).copy()
        count = header.num_samples * header.channels * header.height * header.width
        images = (
            np.frombuffer(_read_exact(fh, count * 8, "image payload"), dtype="<f8")
            .reshape(header.num_samples, header.channels, header.height, header.width)
            .copy()
        )
        trailing = fh.read(1)
        if trailing:
            raise ParseError("trailing bytes after dataset payload", offset=fh.tell() - 1)
    if labels.size and labels.max() >= header.num_classes:
        raise ParseError(
            f"label {int(labels.max())} out of range for {header.num_classes} classes"
        )
    return DatasetBundle(
        images=images, labels=labels, class_names=list(header.class_names)
    )
