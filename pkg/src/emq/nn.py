"""A small feed-forward network engine: Xavier init, backprop, Adam, early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, StateError

log = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("tanh", "relu", "linear")

LossFn = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Mlp:
    """Fully connected network with per-layer activations.

    ``activations`` names the hidden-layer nonlinearities; the output layer is
    linear, with softplus applied to the columns flagged in ``positive_outputs``.
    """

    def __init__(self, layer_sizes, activations, weights, biases,
                 positive_outputs=None, seed=0):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ConfigError(f"invalid layer sizes {layer_sizes}")
        activations = list(activations)
        if len(activations) == 1 and len(layer_sizes) > 3:
            activations = activations * (len(layer_sizes) - 2)
        if len(activations) != len(layer_sizes) - 2:
            raise ConfigError("need one activation per hidden layer")
        for a in activations:
            if a not in HIDDEN_ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(weights):
            raise ConfigError("parameter count does not match layer sizes")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (layer_sizes[i], layer_sizes[i + 1]) or b.shape != (layer_sizes[i + 1],):
                raise ConfigError(f"layer {i} parameter shapes do not chain")
        mask = np.zeros(layer_sizes[-1], dtype=bool)
        if positive_outputs is not None:
            mask[np.asarray(positive_outputs, dtype=int)] = True
        self.layer_sizes = layer_sizes
        self.activations = activations
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.positive_mask = mask
        self.seed = int(seed)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def positive_outputs(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.positive_mask)]

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def set_params(self, params) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.array(params[2 * i], dtype=np.float64)
            self.biases[i] = np.array(params[2 * i + 1], dtype=np.float64)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activations,
                   [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                   self.positive_outputs, self.seed)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def __call__(self, X):
        return forward(self, X, cache=False)


def mlp_init(layer_sizes, activations, seed, positive_outputs=None) -> Mlp:
    """Xavier-normal weights, zero biases, drawn from a generator seeded by ``seed``."""
    layer_sizes = [int(s) for s in layer_sizes] if layer_sizes is not None else []
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ConfigError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_sizes, activations, weights, biases, positive_outputs, seed)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(mlp: Mlp, X, cache: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != mlp.in_dim:
        raise DimensionError(f"expected input with {mlp.in_dim} columns, got shape {X.shape}")
    acts = [X]
    h = X
    n_layers = len(mlp.weights)
    for i in range(n_layers - 1):
        h = _act(mlp.activations[i], h @ mlp.weights[i] + mlp.biases[i])
        acts.append(h)
    z = h @ mlp.weights[-1] + mlp.biases[-1]
    out = z
    if mlp.positive_mask.any():
        out = z.copy()
        out[:, mlp.positive_mask] = softplus(z[:, mlp.positive_mask])
    if cache:
        mlp._cache = (acts, z)
    return out


def backward(mlp: Mlp, upstream_grad) -> list[np.ndarray]:
    """Gradients of sum(upstream_grad * output) for the last cached forward pass."""
    if mlp._cache is None:
        raise StateError("backward called without a matching forward pass")
    acts, z = mlp._cache
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != z.shape:
        raise StateError(f"upstream gradient shape {g.shape} does not match cached output {z.shape}")
    if mlp.positive_mask.any():
        g = g.copy()
        g[:, mlp.positive_mask] *= sigmoid(z[:, mlp.positive_mask])
    n_layers = len(mlp.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ mlp.weights[i].T
        name = mlp.activations[i - 1]
        if name == "tanh":
            g = g * (1.0 - acts[i] ** 2)
        elif name == "relu":
            g = g * (acts[i] > 0.0)
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; aborting training")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.01
    max_epochs: int = 1000
    patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")


@dataclass
class TrainRecord:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    val_history: list = field(default_factory=list)


def epoch_seed(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def train_with_early_stopping(mlp: Mlp, loss: LossFn, train_set, val_set,
                              cfg: TrainConfig) -> tuple[Mlp, TrainRecord]:
    """Mini-batch Adam training with restore-best early stopping.

    ``loss(pred, labels)`` returns (mean loss, d loss / d pred). ``train_set``
    and ``val_set`` are (X, labels) pairs; labels may carry any per-row payload.
    Epoch 0 is the initial parameter state, so the returned parameters are
    never worse on validation than any state visited.
    """
    X_tr, L_tr = train_set
    X_va, L_va = val_set
    if len(X_tr) == 0 or len(X_va) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    if len(X_tr) != len(L_tr) or len(X_va) != len(L_va):
        raise DimensionError("feature and label row counts differ")
    mlp = mlp.copy()
    params = mlp.params()
    state = AdamState.for_params(params)
    n = len(X_tr)

    def val_loss():
        value, _ = loss(forward(mlp, X_va, cache=False), L_va)
        return float(value)

    best = val_loss()
    best_params = [p.copy() for p in params]
    record = TrainRecord(0, best, 0, [best])
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = epoch_seed(cfg.seed, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = forward(mlp, X_tr[idx])
            value, grad = loss(pred, L_tr[idx])
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            adam_step(state, params, backward(mlp, grad), cfg.learning_rate)
        current = val_loss()
        record.val_history.append(current)
        record.epochs_run = epoch
        if current < best:
            best = current
            best_params = [p.copy() for p in params]
            record.best_epoch, record.best_val_loss = epoch, best
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    mlp.set_params(best_params)
    mlp._cache = None
    log.debug("trained %s: best epoch %d of %d, val loss %.6g",
              mlp.layer_sizes, record.best_epoch, record.epochs_run, best)
    return mlp, record
