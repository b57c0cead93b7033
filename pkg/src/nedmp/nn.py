"""Trainable building blocks: parameter store, MLP, GRU, Adam and LR schedules."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "ParamStore",
    "MLPSpec",
    "GRUSpec",
    "MLP",
    "GRU",
    "mlp_forward",
    "gru_forward",
    "Adam",
    "PlateauSchedule",
    "early_stop",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named float64 weight arrays with gradient accumulators, in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=float), requires_grad=True)
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_weights(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self._params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        k = 0
        for t in self._params.values():
            t.value = flat[k : k + t.value.size].reshape(t.value.shape).copy()
            k += t.value.size

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            value = np.asarray(state[name], dtype=float)
            if value.shape != t.value.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {value.shape}, expected {t.value.shape}"
                )
            t.value = value.copy()
        extra = set(state) - set(self._params)
        if extra:
            raise CheckpointError(f"unexpected parameters {sorted(extra)}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    output: str = "identity"  # identity | sigmoid | softmax

    def __post_init__(self):
        if min((self.in_dim, self.out_dim, *self.hidden)) < 1:
            raise ValueError("all MLP dims must be >= 1")
        if self.output not in ("identity", "sigmoid", "softmax"):
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)


@dataclass(frozen=True)
class GRUSpec:
    in_dim: int
    state_dim: int

    def __post_init__(self):
        if min(self.in_dim, self.state_dim) < 1:
            raise ValueError("GRU dims must be >= 1")


@dataclass
class MLP:
    name: str
    spec: MLPSpec
    params: ParamStore

    @classmethod
    def create(cls, params: ParamStore, name: str, spec: MLPSpec, rng) -> "MLP":
        dims = spec.dims
        for k in range(len(dims) - 1):
            params.add(f"{name}.w{k}", glorot(rng, dims[k], dims[k + 1]))
            params.add(f"{name}.b{k}", np.zeros(dims[k + 1]))
        return cls(name, spec, params)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x, self.name)


def mlp_forward(spec: MLPSpec, params: ParamStore, x, name: str = "mlp") -> Tensor:
    """Affine layers with ReLU between them and ``spec.output`` at the end."""
    x = ag.constant(x)
    if x.value.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"{name}: expected input of width {spec.in_dim}, got shape {x.shape}")
    n_layers = len(spec.dims) - 1
    for k in range(n_layers):
        x = ag.linear(x, params[f"{name}.w{k}"], params[f"{name}.b{k}"])
        if k < n_layers - 1:
            x = ag.relu(x)
    if spec.output == "sigmoid":
        x = ag.sigmoid(x)
    elif spec.output == "softmax":
        x = ag.softmax(x)
    return x


@dataclass
class GRU:
    name: str
    spec: GRUSpec
    params: ParamStore

    @classmethod
    def create(cls, params: ParamStore, name: str, spec: GRUSpec, rng) -> "GRU":
        D = spec.state_dim
        params.add(f"{name}.W", np.concatenate([glorot(rng, spec.in_dim, D) for _ in range(3)], 1))
        params.add(f"{name}.U", np.concatenate([glorot(rng, D, D) for _ in range(3)], 1))
        params.add(f"{name}.b", np.zeros(3 * D))
        return cls(name, spec, params)

    def __call__(self, x, h) -> Tensor:
        return gru_forward(self.spec, self.params, x, h, self.name)


def gru_forward(spec: GRUSpec, params: ParamStore, x, h, name: str = "gru") -> Tensor:
    x, h = ag.constant(x), ag.constant(h)
    if x.value.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"{name}: expected input of width {spec.in_dim}, got shape {x.shape}")
    if h.value.ndim != 2 or h.shape[1] != spec.state_dim or h.shape[0] != x.shape[0]:
        raise ValueError(f"{name}: state shape {h.shape} does not match")
    return ag.gru_cell(x, h, params[f"{name}.W"], params[f"{name}.U"], params[f"{name}.b"])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    params: ParamStore
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float = 0.01
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-5
    best: float = np.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def early_stop(history, patience: int = 15) -> bool:
    """True once ``patience`` epochs have passed since the best (lowest) value."""
    if len(history) == 0:
        return False
    best = int(np.argmin(history))
    return len(history) - 1 - best >= patience


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamStore, meta: dict) -> None:
    doc = dict(meta)
    doc["params"] = {
        name: {"shape": list(t.value.shape), "data": t.value.ravel().tolist()}
        for name, t in params.items()
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text())
        raw = doc.pop("params")
        state = {
            name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
            for name, entry in raw.items()
        }
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return doc, state
