"""Direct multi-quantile baselines: Vanilla QR, QRW and interval-score training.

One ReLU network emits all K quantiles at once. Nothing keeps the outputs
ordered, so crossing fans are possible and are evaluated as they come.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .data import NormStats
from .errors import ConfigError, ModelFormatError
from .model import _config_dict, _as_matrix, derive_seed
from .nn import Mlp, TrainConfig, forward, mlp_init, train_with_early_stopping
from .quantiles import QuantileGrid, emqw_weights

LOSS_TAGS = ("vanilla", "weighted", "interval-score")


def direct_layer_sizes(d: int, K: int) -> list[int]:
    return [d, 8 * d, 16 * d, 4 * d, K]


@dataclass
class DirectQuantileModel:
    mlp: Mlp
    grid: QuantileGrid
    loss: str = "vanilla"
    norm_stats: NormStats | None = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    meta: dict = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.mlp.in_dim

    def predict_quantiles(self, X, sort: bool = False) -> np.ndarray:
        Q = forward(self.mlp, _as_matrix(X, self.in_dim), cache=False)
        return np.sort(Q, axis=1) if sort else Q

    def predict_fans(self, X) -> list[np.ndarray]:
        return [self.predict_quantiles(X)]


def pinball_sum_loss(grid: QuantileGrid, weights):
    taus = grid.taus
    w = np.asarray(weights, dtype=np.float64)

    def loss(pred, labels):
        y = labels[:, 0]
        diff = y[:, None] - pred
        below = diff < 0.0
        value = float(np.mean((diff * (taus - below)) @ w))
        return value, (below - taus) * w / len(y)

    return loss


def interval_score_loss(grid: QuantileGrid):
    """Mean interval score over centered pairs (level 2*tau_k) plus median pinball."""
    pairs = grid.centered_pairs()
    lo_idx = np.array([a for a, _ in pairs])
    hi_idx = np.array([b for _, b in pairs])
    alpha = 2.0 * grid.taus[lo_idx]
    med = grid.median_index()
    n_pairs = len(pairs)

    def loss(pred, labels):
        y = labels[:, 0]
        n = len(y)
        lo, hi = pred[:, lo_idx], pred[:, hi_idx]
        under = y[:, None] < lo
        over = y[:, None] > hi
        score = (hi - lo) + (2.0 / alpha) * (lo - y[:, None]) * under + (2.0 / alpha) * (y[:, None] - hi) * over
        dm = y - pred[:, med]
        m_below = dm < 0.0
        value = float(np.mean(score.sum(axis=1) / n_pairs + dm * (0.5 - m_below)))
        grad = np.zeros_like(pred)
        grad[:, lo_idx] = (-1.0 + (2.0 / alpha) * under) / (n_pairs * n)
        grad[:, hi_idx] = (1.0 - (2.0 / alpha) * over) / (n_pairs * n)
        grad[:, med] = (m_below - 0.5) / n
        return value, grad

    return loss


def fit_direct(train, val, cfg: TrainConfig, grid: QuantileGrid, loss: str = "vanilla",
               weights=None, norm_stats: NormStats | None = None) -> DirectQuantileModel:
    if loss not in LOSS_TAGS:
        raise ConfigError(f"unknown loss tag {loss!r}")
    X_tr, y_tr = train
    X_va, y_va = val
    if loss == "interval-score":
        if not grid.is_symmetric() or grid.K % 2 == 0:
            raise ConfigError("interval-score training needs a symmetric grid with odd K")
        fn = interval_score_loss(grid)
    else:
        if weights is None:
            weights = emqw_weights(grid).w if loss == "weighted" else np.ones(grid.K)
        fn = pinball_sum_loss(grid, weights)
    seed = derive_seed(cfg.seed, 0)
    mlp = mlp_init(direct_layer_sizes(X_tr.shape[1], grid.K), ["relu"] * 3, seed)
    run_cfg = TrainConfig(cfg.batch_size, cfg.learning_rate, cfg.max_epochs, cfg.patience,
                          cfg.val_fraction, derive_seed(seed, 1))
    mlp, rec = train_with_early_stopping(mlp, fn, (X_tr, np.asarray(y_tr)[:, None]),
                                         (X_va, np.asarray(y_va)[:, None]), run_cfg)
    return DirectQuantileModel(mlp, grid, loss, norm_stats, cfg,
                               {"best_epoch": rec.best_epoch, "best_val_loss": rec.best_val_loss})


def fit_vanilla_qr(train, val, cfg: TrainConfig, grid: QuantileGrid, norm_stats=None):
    return fit_direct(train, val, cfg, grid, "vanilla", norm_stats=norm_stats)


def fit_qrw(train, val, cfg: TrainConfig, grid: QuantileGrid, norm_stats=None, weights=None):
    """Weighted pinball training; ``weights`` overrides the normal-based weights."""
    return fit_direct(train, val, cfg, grid, "weighted", weights=weights, norm_stats=norm_stats)


def fit_interval_score_model(train, val, cfg: TrainConfig, grid: QuantileGrid, norm_stats=None):
    return fit_direct(train, val, cfg, grid, "interval-score", norm_stats=norm_stats)


def save_direct_model(model: DirectQuantileModel, path, extra: dict | None = None) -> None:
    headers, arrays = container.pack_networks([model.mlp])
    header = {"type": "direct", "loss": model.loss, "grid": model.grid.to_spec(),
              "train_config": _config_dict(model.train_config),
              "norm_stats": model.norm_stats.to_dict() if model.norm_stats else None,
              "networks": headers, "meta": {**model.meta, **(extra or {})}}
    container.write_container(path, container.DQM_MAGIC, header, arrays)


def direct_from_container(header, arrays) -> DirectQuantileModel:
    (mlp,) = container.unpack_networks(header["networks"], arrays)
    stats = header.get("norm_stats")
    return DirectQuantileModel(mlp, QuantileGrid(tuple(header["grid"])), header["loss"],
                               NormStats.from_dict(stats) if stats else None,
                               TrainConfig(**header["train_config"]), header.get("meta", {}))


def load_direct_model(path) -> DirectQuantileModel:
    magic, header, arrays = container.read_container(path)
    if magic != container.DQM_MAGIC:
        raise ModelFormatError(f"{path} does not hold a direct quantile model")
    return direct_from_container(header, arrays)
