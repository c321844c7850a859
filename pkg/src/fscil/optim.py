"""Named parameters, the parameter store, Adam, and the cosine schedule."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


class Parameter:
    """A named, optionally trainable tensor."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, array: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.array(array, dtype=np.float64), requires_grad=trainable)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable
        if not self.trainable:
            self.tensor.grad = None

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


class ParamStore:
    """Insertion-ordered mapping of unique parameter names to parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, array, trainable)
        self._params[name] = p
        return p

    def remove(self, name: str) -> None:
        del self._params[name]

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def apply_policy(self, trainable_names: Iterable[str]) -> None:
        """Make exactly the named parameters trainable, freeze the rest."""
        wanted = set(trainable_names)
        missing = wanted - set(self._params)
        if missing:
            raise ConfigError(f"unknown parameter names in policy: {sorted(missing)}")
        for name, p in self._params.items():
            p.set_trainable(name in wanted)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        keys = self.names() if names is None else list(names)
        return {k: self._params[k].data.copy() for k in keys}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ConfigError(
                    f"restore shape mismatch for {name!r}: {p.data.shape} vs {arr.shape}"
                )
            p.data = arr.copy()


class AdamState:
    """First/second moment buffers plus the step counter for Adam."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Frozen parameters are skipped entirely (their moments are never
    touched). A trainable parameter without a gradient is a caller bug.
    All gradients held by ``params`` are cleared afterwards.
    """
    state.step_count += 1
    t = state.step_count
    lr_t = state.lr if lr is None else float(lr)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        if not p.trainable:
            continue
        if p.tensor.grad is None:
            raise ContractError(f"missing gradient on trainable parameter {p.name!r}")
        g = p.tensor.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + state.eps)
    for p in params:
        p.tensor.grad = None


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    """Half-cosine decay from lr_base at step 0 toward zero at total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
