"""Minimal numpy neural-network substrate.

Embedding tables, leaky-ReLU dense stacks, a bank of sigmoid towers sharing one
hidden input, clamped binary cross-entropy and an Adagrad optimizer with a
decaying accumulator. Gradients are hand-derived; there is no autodiff graph.
Everything runs in float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError

PROB_EPS = 1e-7
LOGIT_CLIP = 30.0
LEAKY_SLOPE = 0.01


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per parameter name.

    Keying on the unprefixed name (not on creation order) gives every
    architecture that shares a tower role identical initial values for it.
    """
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def sigmoid(z):
    return expit(z)


def leaky_relu(x, alpha: float = LEAKY_SLOPE):
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_grad(x, alpha: float = LEAKY_SLOPE):
    # derivative at exactly 0 is defined as 1
    return np.where(x >= 0, 1.0, alpha)


def bce(p, label, eps: float = PROB_EPS):
    pc = np.clip(p, eps, 1.0 - eps)
    return -label * np.log(pc) - (1 - label) * np.log1p(-pc)


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class EmbeddingTable:
    def __init__(self, field_id: int, cardinality: int, dim: int, seed: int = 0, prefix: str = ""):
        if cardinality <= 0 or dim <= 0:
            raise ConfigError(f"embedding field {field_id}: cardinality and dim must be positive")
        self.field_id = field_id
        self.cardinality = cardinality
        self.dim = dim
        init = param_rng(seed, f"emb.{field_id}").uniform(-0.05, 0.05, size=(cardinality, dim))
        self.table = ParamTensor(f"{prefix}emb.{field_id}", init)

    def lookup(self, index: np.ndarray) -> np.ndarray:
        return self.table.values[index]

    def accumulate(self, index: np.ndarray, grad_rows: np.ndarray) -> None:
        np.add.at(self.table.grad, index, grad_rows)


class DenseStack:
    """Fully connected layers ``layer_dims[0] -> ... -> layer_dims[-1]``.

    Leaky ReLU follows every layer except, when ``final_activation`` is False,
    the last one (a tower's final unit feeds a sigmoid instead).
    """

    def __init__(
        self,
        name: str,
        layer_dims: Sequence[int],
        alpha: float = LEAKY_SLOPE,
        final_activation: bool = True,
        seed: int = 0,
        prefix: str = "",
    ):
        if len(layer_dims) < 2 or any(int(d) <= 0 for d in layer_dims):
            raise ConfigError(f"{name}: layer_dims must hold at least two positive widths")
        self.name = prefix + name
        self.layer_dims = [int(d) for d in layer_dims]
        self.alpha = alpha
        self.final_activation = final_activation
        self.weights: list[ParamTensor] = []
        self.biases: list[ParamTensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            w = param_rng(seed, f"{name}.w{i}").standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(ParamTensor(f"{self.name}.w{i}", w))
            self.biases.append(ParamTensor(f"{self.name}.b{i}", np.zeros(fan_out)))
        self._cache: list[tuple[np.ndarray, np.ndarray]] = []

    @property
    def params(self) -> list[ParamTensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _activated(self, i: int) -> bool:
        return self.final_activation or i < len(self.weights) - 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.layer_dims[0]:
            raise ConfigError(f"{self.name}: expected input width {self.layer_dims[0]}, got {x.shape[-1]}")
        self._cache = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = x @ w.values + b.values
            self._cache.append((x, pre))
            x = leaky_relu(pre, self.alpha) if self._activated(i) else pre
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.weights))):
            x, pre = self._cache[i]
            if self._activated(i):
                dout = dout * leaky_relu_grad(pre, self.alpha)
            self.weights[i].grad += x.T @ dout
            self.biases[i].grad += dout.sum(axis=0)
            dout = dout @ self.weights[i].values.T
        return dout


def forward_tower(hidden: np.ndarray, tower: DenseStack) -> np.ndarray:
    """Probability output of a single tower; strictly inside (0, 1)."""
    if tower.layer_dims[-1] != 1:
        raise ConfigError(f"{tower.name}: final tower width must be 1")
    logit = tower.forward(hidden)[..., 0]
    return sigmoid(np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP))


class TowerBank:
    """T independent towers evaluated together on one shared hidden vector.

    Numerically the same as T separate ``DenseStack`` towers (same names, same
    initial values), stored stacked so a batch runs as a few batched matmuls.
    """

    def __init__(
        self,
        prefix: str,
        roles: Sequence[str],
        in_dim: int,
        hidden_dims: Sequence[int],
        alpha: float = LEAKY_SLOPE,
        seed: int = 0,
    ):
        if not roles:
            raise ConfigError("tower bank needs at least one role")
        self.roles = list(roles)
        self.alpha = alpha
        dims = [int(in_dim), *[int(d) for d in hidden_dims], 1]
        self.layer_dims = dims
        self.weights: list[ParamTensor] = []
        self.biases: list[ParamTensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = np.stack(
                [
                    DenseStack(f"tower.{r}", dims, alpha, final_activation=False, seed=seed)
                    .weights[i].values
                    for r in self.roles
                ]
            )
            self.weights.append(ParamTensor(f"{prefix}towers.w{i}", w))
            self.biases.append(ParamTensor(f"{prefix}towers.b{i}", np.zeros((len(self.roles), fan_out))))
        self._cache: list[tuple[np.ndarray, np.ndarray]] = []
        self._clip_mask: np.ndarray | None = None

    @property
    def params(self) -> list[ParamTensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, hidden: np.ndarray) -> np.ndarray:
        """Clipped logits of shape (T, N)."""
        if hidden.shape[-1] != self.layer_dims[0]:
            raise ConfigError(f"tower input width {self.layer_dims[0]} != hidden width {hidden.shape[-1]}")
        self._cache = []
        last = len(self.weights) - 1
        x = np.broadcast_to(hidden, (len(self.roles), *hidden.shape))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = np.matmul(x, w.values) + b.values[:, None, :]
            self._cache.append((x, pre))
            x = leaky_relu(pre, self.alpha) if i < last else pre
        logits = x[..., 0]
        self._clip_mask = np.abs(logits) <= LOGIT_CLIP
        return np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Takes dL/dlogit (T, N), returns dL/dhidden (N, H)."""
        dout = np.where(self._clip_mask, dlogits, 0.0)[..., None]
        last = len(self.weights) - 1
        for i in reversed(range(len(self.weights))):
            x, pre = self._cache[i]
            if i < last:
                dout = dout * leaky_relu_grad(pre, self.alpha)
            self.weights[i].grad += np.matmul(x.transpose(0, 2, 1), dout)
            self.biases[i].grad += dout.sum(axis=1)
            dout = np.matmul(dout, self.weights[i].values.transpose(0, 2, 1))
        return dout.sum(axis=0)


class Network:
    """Shared bottom (embeddings + dense stack) under a bank of sigmoid towers."""

    def __init__(
        self,
        cardinalities: Sequence[int],
        roles: Sequence[str],
        emb_dim: int = 8,
        bottom_dims: Sequence[int] = (32, 16),
        tower_dims: Sequence[int] = (16,),
        alpha: float = LEAKY_SLOPE,
        seed: int = 0,
        prefix: str = "",
    ):
        self.cardinalities = [int(c) for c in cardinalities]
        self.prefix = prefix
        self.embeddings = [
            EmbeddingTable(f, c, emb_dim, seed=seed, prefix=prefix) for f, c in enumerate(self.cardinalities)
        ]
        in_dim = emb_dim * len(self.cardinalities)
        self.bottom = DenseStack("bottom", [in_dim, *bottom_dims], alpha, final_activation=True, seed=seed, prefix=prefix)
        self.towers = TowerBank(prefix, roles, self.bottom.layer_dims[-1], tower_dims, alpha, seed=seed)
        self._features: np.ndarray | None = None

    @property
    def roles(self) -> list[str]:
        return self.towers.roles

    @property
    def params(self) -> list[ParamTensor]:
        return [e.table for e in self.embeddings] + self.bottom.params + self.towers.params

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != len(self.cardinalities):
            raise DataError(f"features must have shape (N, {len(self.cardinalities)}), got {features.shape}")
        if features.size and (features.min() < 0 or np.any(features.max(axis=0) >= self.cardinalities)):
            raise DataError("feature index outside its field's cardinality")
        return features.astype(np.int64, copy=False)

    def forward_bottom(self, features: np.ndarray) -> np.ndarray:
        features = self.check_features(features)
        self._features = features
        emb = np.concatenate([e.lookup(features[:, f]) for f, e in enumerate(self.embeddings)], axis=1)
        return self.bottom.forward(emb)

    def forward(self, features: np.ndarray) -> np.ndarray:
        return self.towers.forward(self.forward_bottom(features))

    def heads(self, features: np.ndarray) -> dict[str, np.ndarray]:
        probs = sigmoid(self.forward(features))
        return dict(zip(self.roles, probs))

    def backward(self, dlogits: np.ndarray) -> None:
        dh = self.towers.backward(dlogits)
        demb = self.bottom.backward(dh)
        dim = self.embeddings[0].dim
        for f, e in enumerate(self.embeddings):
            e.accumulate(self._features[:, f], demb[:, f * dim : (f + 1) * dim])


@dataclass
class AdagradDecay:
    """Adagrad whose squared-gradient accumulator decays by ``decay`` each step."""

    learning_rate: float = 0.05
    decay: float = 0.9999
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def step(self, params: Iterable[ParamTensor]) -> None:
        for p in params:
            acc = self.accumulators.get(p.name)
            if acc is None:
                acc = self.accumulators[p.name] = np.zeros_like(p.values)
            acc *= self.decay
            acc += p.grad * p.grad
            p.values -= self.learning_rate * p.grad / np.sqrt(acc + self.epsilon)
            p.zero_grad()
