"""Ensemble multi-quantile estimator.

A Gaussian head F0 produces an initial fan mu + sigma * z_k. Each ensemble step
adds a small network whose four outputs define a tanh-cubic lambda_k per level;
the fan moves by a piecewise-linear g(lambda_k) that never passes the midpoints
to its neighbours, so fans stay strictly increasing. The number of steps is
chosen on validation calibration error.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .data import NormStats
from .errors import ConfigError, DataError, DimensionError, DomainError, InvariantError, ModelFormatError
from .metrics import ece
from .nn import Mlp, TrainConfig, TrainRecord, forward, mlp_init, train_with_early_stopping
from .quantiles import QuantileGrid, emqw_weights, percent_grid

log = logging.getLogger(__name__)

VARIANTS = ("emq0", "emq", "emqw")
SIGMA_FLOOR = 1e-6
# tanh saturates to exactly +-1 in float64 for |z| > ~19; keep lambda strictly inside
LAMBDA_LIMIT = 1.0 - 1e-9
POLY_DEGREE = 3


@dataclass
class EnsembleStepConfig:
    boundary_B: float = 10.0
    weak_hidden_sizes: tuple = (16, 8)
    poly_degree: int = POLY_DEGREE

    def __post_init__(self):
        self.weak_hidden_sizes = tuple(int(s) for s in self.weak_hidden_sizes)
        if not self.boundary_B > 0:
            raise ConfigError("boundary_B must be > 0")
        if self.poly_degree != POLY_DEGREE:
            raise ConfigError("poly_degree is fixed at 3")
        if any(s < 1 for s in self.weak_hidden_sizes):
            raise ConfigError("weak_hidden_sizes must be positive")


@dataclass
class AdaptiveTConfig:
    T_max: int = 40
    t1: int = 10
    t2: int = 5
    metric: str = "ece"

    def __post_init__(self):
        if self.T_max < 0:
            raise ConfigError("T_max must be >= 0")
        if not self.t1 > self.t2 >= 1:
            raise ConfigError("adaptive-T needs t1 > t2 >= 1")
        if self.metric != "ece":
            raise ConfigError(f"unsupported adaptive-T metric {self.metric!r}")


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def loss_weights(variant: str, grid: QuantileGrid) -> np.ndarray:
    return emqw_weights(grid).w if variant == "emqw" else np.ones(grid.K)


# Fixed transforms.

def gaussian_head_quantiles(mu, sigma, grid: QuantileGrid) -> np.ndarray:
    """q_k = mu + sigma * Phi^-1(tau_k); scalars give a length-K fan, vectors an n x K matrix."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0.0)):
        raise DomainError("sigma must be > 0")
    return mu[..., None] + sigma[..., None] * grid.z


def lambda_head(coeffs, grid: QuantileGrid) -> np.ndarray:
    """lambda_k = tanh(a0 + a1 tau_k + a2 tau_k^2 + a3 tau_k^3)."""
    return np.clip(np.tanh(np.asarray(coeffs, dtype=np.float64) @ _vandermonde(grid).T),
                   -LAMBDA_LIMIT, LAMBDA_LIMIT)


def _vandermonde(grid):
    return np.vander(grid.taus, POLY_DEGREE + 1, increasing=True)


def _virtual_ends(Q, B):
    # -B and +B, reflected past the fan ends when a row reaches beyond them, so the
    # padded fan stays ordered for any input (continuous at |q| = B)
    lo = np.minimum(-B, 2.0 * Q[:, :1] + B)
    hi = np.maximum(B, 2.0 * Q[:, -1:] - B)
    return lo, hi


def _half_gaps(Q, B):
    """(r, l): half distance to the right and (negative) left neighbour, virtual ends outside."""
    lo, hi = _virtual_ends(Q, B)
    padded = np.concatenate([lo, Q, hi], axis=1)
    r = 0.5 * (padded[:, 2:] - Q)
    l = 0.5 * (padded[:, :-2] - Q)
    return r, l


def _g_slope(lam, r, l):
    # lambda == 0 takes the left branch; both branches give g(0) = 0
    return np.where(lam > 0.0, r, -l)


def g_transform(q_prev, lambdas, B: float) -> np.ndarray:
    """Move each quantile by g(lambda_k) = (-l_k + 1{lambda_k > 0}(r_k + l_k)) * lambda_k."""
    Q = np.asarray(q_prev, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.float64)
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    lam = np.broadcast_to(np.atleast_2d(lam), Q.shape)
    if np.any(np.diff(Q, axis=1) <= 0.0):
        raise InvariantError("previous fan is not strictly increasing")
    if np.any(np.abs(lam) >= 1.0):
        raise DomainError("lambda values must lie in (-1, 1)")
    r, l = _half_gaps(Q, B)
    out = Q + _g_slope(lam, r, l) * lam
    return out[0] if single else out


def _apply_step(Q, coeffs, grid, B):
    lam = lambda_head(coeffs, grid)
    r, l = _half_gaps(Q, B)
    return Q + _g_slope(lam, r, l) * lam


def _check_monotone(Q, where: str):
    if np.any(np.diff(Q, axis=1) <= 0.0):
        raise InvariantError(f"quantile fan lost strict monotonicity ({where})")


# Losses routed through the fixed transforms. Each returns (mean loss, d loss / d network output).

def initial_step_loss(grid: QuantileGrid, weights):
    z = grid.z
    taus = grid.taus
    w = np.asarray(weights, dtype=np.float64)

    def loss(pred, labels):
        y = labels[:, 0]
        mu, sigma = pred[:, 0], pred[:, 1] + SIGMA_FLOOR
        Q = mu[:, None] + sigma[:, None] * z
        diff = y[:, None] - Q
        below = diff < 0.0
        value = float(np.mean((diff * (taus - below)) @ w))
        gQ = (below - taus) * w / len(y)
        grad = np.column_stack([gQ.sum(axis=1), gQ @ z])
        return value, grad

    return loss


def ensemble_step_loss(grid: QuantileGrid, weights, B: float):
    """Labels are [y, q_prev_1..q_prev_K]; the previous fan is held constant."""
    V = _vandermonde(grid)
    taus = grid.taus
    w = np.asarray(weights, dtype=np.float64)

    def loss(pred, labels):
        y, Qp = labels[:, 0], labels[:, 1:]
        raw = np.tanh(pred @ V.T)
        lam = np.clip(raw, -LAMBDA_LIMIT, LAMBDA_LIMIT)
        r, l = _half_gaps(Qp, B)
        s = _g_slope(lam, r, l)
        Q = Qp + s * lam
        diff = y[:, None] - Q
        below = diff < 0.0
        value = float(np.mean((diff * (taus - below)) @ w))
        gQ = (below - taus) * w / len(y)
        gz = gQ * s * (1.0 - raw * raw) * (np.abs(raw) < LAMBDA_LIMIT)
        return value, gz @ V

    return loss


# Model.

@dataclass
class EmqModel:
    grid: QuantileGrid
    f0: Mlp
    weak_learners: list
    step_config: EnsembleStepConfig = field(default_factory=EnsembleStepConfig)
    variant: str = "emq"
    T_ada: int = 0
    trace: list = field(default_factory=list)
    t_prime: int = 0
    stopped_early: bool = False
    norm_stats: NormStats | None = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    adaptive_config: AdaptiveTConfig = field(default_factory=AdaptiveTConfig)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(self.weak_learners) != self.T_ada:
            raise ConfigError("number of weak learners must equal T_ada")

    @property
    def in_dim(self) -> int:
        return self.f0.in_dim

    def gaussian_params(self, X) -> tuple[np.ndarray, np.ndarray]:
        out = forward(self.f0, _as_matrix(X, self.in_dim), cache=False)
        return out[:, 0], out[:, 1] + SIGMA_FLOOR

    def predict_fans(self, X) -> list[np.ndarray]:
        """Fans after every step: element t is Q^t for t = 0..T_ada."""
        X = _as_matrix(X, self.in_dim)
        mu, sigma = self.gaussian_params(X)
        Q = gaussian_head_quantiles(mu, sigma, self.grid)
        fans = [Q]
        for t, mlp in enumerate(self.weak_learners, start=1):
            Q = _apply_step(Q, forward(mlp, X, cache=False), self.grid, self.step_config.boundary_B)
            _check_monotone(Q, f"step {t}")
            fans.append(Q)
        return fans

    def predict_quantiles(self, X) -> np.ndarray:
        """Final n x K quantile matrix for normalized inputs (normalized label units)."""
        return self.predict_fans(X)[-1]

    def predict_raw(self, X_raw) -> np.ndarray:
        """Quantiles in original label units for un-normalized inputs."""
        stats = self.norm_stats or NormStats.identity(self.in_dim)
        return stats.inverse_labels(self.predict_quantiles(stats.transform_features(X_raw)))

    def networks(self) -> list[Mlp]:
        return [self.f0, *self.weak_learners]


def predict_quantiles(model, X) -> np.ndarray:
    return model.predict_quantiles(X)


def _as_matrix(X, d):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionError(f"expected inputs with {d} columns, got shape {X.shape}")
    return X


# Training.

def f0_layer_sizes(d: int) -> list[int]:
    return [d, 8 * d, 16 * d, 4 * d, 2]


def fit_initial(train, val, cfg: TrainConfig, grid: QuantileGrid, weights=None,
                seed: int | None = None) -> tuple[Mlp, TrainRecord]:
    """Train the Gaussian head (tanh hidden [8,16,4]*d, linear mu, softplus sigma)."""
    X_tr, y_tr = train
    X_va, y_va = val
    d = X_tr.shape[1]
    seed = cfg.seed if seed is None else seed
    w = np.ones(grid.K) if weights is None else np.asarray(weights, dtype=np.float64)
    mlp = mlp_init(f0_layer_sizes(d), ["tanh"] * 3, seed, positive_outputs=[1])
    run_cfg = TrainConfig(cfg.batch_size, cfg.learning_rate, cfg.max_epochs, cfg.patience,
                          cfg.val_fraction, derive_seed(seed, 1))
    return train_with_early_stopping(mlp, initial_step_loss(grid, w),
                                     (X_tr, y_tr[:, None]), (X_va, y_va[:, None]), run_cfg)


def fit_ensemble_step(train, val, Q_train, Q_val, cfg: TrainConfig, step_config: EnsembleStepConfig,
                      grid: QuantileGrid, weights=None, seed: int = 0) -> tuple[Mlp, TrainRecord]:
    """Train one weak learner on top of the cached previous fans (held constant)."""
    X_tr, y_tr = train
    X_va, y_va = val
    w = np.ones(grid.K) if weights is None else np.asarray(weights, dtype=np.float64)
    sizes = [X_tr.shape[1], *step_config.weak_hidden_sizes, POLY_DEGREE + 1]
    mlp = mlp_init(sizes, ["tanh"] * len(step_config.weak_hidden_sizes), seed)
    run_cfg = TrainConfig(cfg.batch_size, cfg.learning_rate, cfg.max_epochs, cfg.patience,
                          cfg.val_fraction, derive_seed(seed, 1))
    loss = ensemble_step_loss(grid, w, step_config.boundary_B)
    return train_with_early_stopping(mlp, loss, (X_tr, np.column_stack([y_tr, Q_train])),
                                     (X_va, np.column_stack([y_va, Q_val])), run_cfg)


def adaptive_stop_check(e_history, t1: int, t2: int) -> tuple[bool, int]:
    """Stop at step t >= t1 when the last t2 errors average above the t1 - t2 before them."""
    if not t1 > t2 >= 1:
        raise ConfigError("adaptive-T needs t1 > t2 >= 1")
    t = len(e_history) - 1
    if t < t1:
        return False, t
    e = np.asarray(e_history, dtype=np.float64)
    recent = e[t - t2 + 1:t + 1].mean()
    older = e[t - t1 + 1:t - t2 + 1].mean()
    return bool(recent > older), t


def select_T_ada(e_history, t_prime: int) -> int:
    """argmin of e_0..e_t'; ties go to the smallest step."""
    return int(np.argmin(np.asarray(e_history[:t_prime + 1], dtype=np.float64)))


def fit_emq(train, val, grid: QuantileGrid | None = None, variant: str = "emq",
            train_cfg: TrainConfig | None = None, step_cfg: EnsembleStepConfig | None = None,
            adaptive_cfg: AdaptiveTConfig | None = None, norm_stats: NormStats | None = None) -> EmqModel:
    """Fit the Gaussian head, then ensemble steps until T_max or the adaptive stop.

    ``train`` and ``val`` are (X, y) pairs in normalized units. The validation
    set drives both early stopping and the choice of T_ada.
    """
    grid = grid or percent_grid()
    train_cfg = train_cfg or TrainConfig()
    step_cfg = step_cfg or EnsembleStepConfig()
    adaptive_cfg = adaptive_cfg or AdaptiveTConfig()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    X_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train)
    X_va, y_va = (np.asarray(a, dtype=np.float64) for a in val)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise DataError("training and validation sets must be non-empty")
    if X_tr.shape[1] != X_va.shape[1]:
        raise DimensionError("train and validation feature counts differ")
    T_max = 0 if variant == "emq0" else adaptive_cfg.T_max
    w = loss_weights(variant, grid)
    B = step_cfg.boundary_B
    seed = train_cfg.seed

    f0, rec0 = fit_initial((X_tr, y_tr), (X_va, y_va), train_cfg, grid, w, seed=derive_seed(seed, 0))
    mu, sigma = _gauss(f0, X_tr)
    Q_tr = gaussian_head_quantiles(mu, sigma, grid)
    mu, sigma = _gauss(f0, X_va)
    Q_va = gaussian_head_quantiles(mu, sigma, grid)
    trace = [ece(Q_va, y_va, grid)]
    epochs = [rec0.best_epoch]
    learners = []
    t_prime, stopped = 0, False
    for t in range(1, T_max + 1):
        mlp, rec = fit_ensemble_step((X_tr, y_tr), (X_va, y_va), Q_tr, Q_va, train_cfg, step_cfg,
                                     grid, w, seed=derive_seed(seed, t))
        Q_tr = _apply_step(Q_tr, forward(mlp, X_tr, cache=False), grid, B)
        Q_va = _apply_step(Q_va, forward(mlp, X_va, cache=False), grid, B)
        _check_monotone(Q_tr, f"training fans, step {t}")
        _check_monotone(Q_va, f"validation fans, step {t}")
        learners.append(mlp)
        trace.append(ece(Q_va, y_va, grid))
        epochs.append(rec.best_epoch)
        t_prime = t
        log.info("step %d: validation ECE %.5f", t, trace[-1])
        stopped, _ = adaptive_stop_check(trace, adaptive_cfg.t1, adaptive_cfg.t2)
        if stopped:
            break
    T_ada = select_T_ada(trace, t_prime)
    span = max(np.abs(Q_tr).max(), np.abs(Q_va).max())
    if span >= B:
        warnings.warn(f"fitted quantiles reach |q| = {span:.3g} >= boundary_B = {B}", RuntimeWarning,
                      stacklevel=2)
    return EmqModel(grid, f0, learners[:T_ada], step_cfg, variant, T_ada, trace, t_prime, stopped,
                    norm_stats, train_cfg, adaptive_cfg, {"best_epochs": epochs})


def _gauss(f0, X):
    out = forward(f0, X, cache=False)
    return out[:, 0], out[:, 1] + SIGMA_FLOOR


# Serialization.

def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_model(model: EmqModel, path, extra: dict | None = None) -> None:
    headers, arrays = container.pack_networks(model.networks())
    header = {
        "type": "emq", "variant": model.variant, "grid": model.grid.to_spec(),
        "step_config": _config_dict(model.step_config),
        "train_config": _config_dict(model.train_config),
        "adaptive_config": _config_dict(model.adaptive_config),
        "T_ada": model.T_ada, "trace": list(model.trace), "t_prime": model.t_prime,
        "stopped_early": model.stopped_early,
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats else None,
        "networks": headers, "meta": {**model.meta, **(extra or {})},
    }
    container.write_container(path, container.EMQ_MAGIC, header, arrays)


def model_from_container(header, arrays) -> EmqModel:
    nets = container.unpack_networks(header["networks"], arrays)
    stats = header.get("norm_stats")
    step = header["step_config"]
    return EmqModel(
        grid=QuantileGrid(tuple(header["grid"])), f0=nets[0], weak_learners=nets[1:],
        step_config=EnsembleStepConfig(**step), variant=header["variant"], T_ada=header["T_ada"],
        trace=list(header["trace"]), t_prime=header["t_prime"], stopped_early=header["stopped_early"],
        norm_stats=NormStats.from_dict(stats) if stats else None,
        train_config=TrainConfig(**header["train_config"]),
        adaptive_config=AdaptiveTConfig(**header["adaptive_config"]), meta=header.get("meta", {}),
    )


def load_model(path) -> EmqModel:
    magic, header, arrays = container.read_container(path)
    if magic != container.EMQ_MAGIC:
        raise ModelFormatError(f"{path} holds a {magic.decode()} model, not an EMQ model")
    try:
        return model_from_container(header, arrays)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path} has an incomplete header: {exc}") from exc
