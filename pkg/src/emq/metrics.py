"""Interval calibration / sharpness metrics and implied densities."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .quantiles import QuantileGrid

TAIL_LEVELS = (0.05, 0.10, 0.15, 0.20)


def _check(Q, grid, y=None):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != grid.K:
        raise DimensionError(f"expected an n x {grid.K} quantile matrix, got {Q.shape}")
    if Q.shape[0] < 1:
        raise DimensionError("need at least one row")
    if y is not None:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != Q.shape[0]:
            raise DimensionError("label count does not match quantile rows")
    return Q, y


def pair_coverage(Q, y, grid: QuantileGrid) -> np.ndarray:
    """Fraction of rows strictly inside each centered interval (ties are not covered)."""
    Q, y = _check(Q, grid, y)
    pairs = grid.centered_pairs()
    lo = Q[:, [a for a, _ in pairs]]
    hi = Q[:, [b for _, b in pairs]]
    return np.mean((lo < y[:, None]) & (y[:, None] < hi), axis=0)


def pair_width(Q, grid: QuantileGrid, absolute: bool = True) -> np.ndarray:
    """Mean width per centered pair; ``absolute=False`` keeps the sign of crossed pairs."""
    Q, _ = _check(Q, grid)
    pairs = grid.centered_pairs()
    w = Q[:, [b for _, b in pairs]] - Q[:, [a for a, _ in pairs]]
    return np.mean(np.abs(w) if absolute else w, axis=0)


def _nominal(grid):
    t = grid.taus
    return np.array([1.0 - 2.0 * t[a] for a, _ in grid.centered_pairs()])


def eice(Q, y, grid: QuantileGrid) -> float:
    return float(np.mean(np.abs(_nominal(grid) - pair_coverage(Q, y, grid))))


def eis(Q, grid: QuantileGrid) -> float:
    return float(np.mean(pair_width(Q, grid)))


def tail_coverage(Q, y, grid: QuantileGrid, tail_levels=TAIL_LEVELS) -> np.ndarray:
    Q, y = _check(Q, grid, y)
    cov = []
    for tau in tail_levels:
        a, b = grid.index_of(tau), grid.index_of(1.0 - tau)
        cov.append(np.mean((Q[:, a] < y) & (y < Q[:, b])))
    return np.array(cov)


def tice(Q, y, grid: QuantileGrid, tail_levels=TAIL_LEVELS) -> float:
    nominal = 1.0 - 2.0 * np.asarray(tail_levels, dtype=np.float64)
    return float(np.mean(np.abs(nominal - tail_coverage(Q, y, grid, tail_levels))))


def calibration_curve(Q, y, grid: QuantileGrid) -> np.ndarray:
    """Per-level empirical frequency of y <= q_tau."""
    Q, y = _check(Q, grid, y)
    return np.mean(y[:, None] <= Q, axis=0)


def ece(Q, y, grid: QuantileGrid) -> float:
    """Mean over levels of |tau - empirical frequency|; the adaptive-T validation metric."""
    return float(np.mean(np.abs(grid.taus - calibration_curve(Q, y, grid))))


@dataclass
class ImpliedDensity:
    midpoints: np.ndarray
    density: np.ndarray
    valid: bool
    infinite_cells: list

    def rows(self):
        return list(zip(self.midpoints.tolist(), self.density.tolist()))


def implied_density(fan, grid: QuantileGrid) -> ImpliedDensity:
    """Finite-difference density between consecutive quantiles of one fan.

    Crossing fans give negative values, reported as-is with ``valid=False``.
    Equal consecutive quantiles give +inf in that cell.
    """
    q = np.asarray(fan, dtype=np.float64).reshape(-1)
    if q.size != grid.K or grid.K < 2:
        raise DimensionError("fan must have one entry per grid level and K >= 2")
    dq = np.diff(q)
    dt = np.diff(grid.taus)
    with np.errstate(divide="ignore"):
        dens = np.where(dq == 0.0, np.inf, dt / np.where(dq == 0.0, 1.0, dq))
    infinite = [int(i) for i in np.flatnonzero(dq == 0.0)]
    valid = bool(np.all(dq > 0.0))
    return ImpliedDensity(0.5 * (q[:-1] + q[1:]), dens, valid, infinite)


@dataclass
class EvalReport:
    eice: float
    eis: float
    tice: float
    ece: float
    per_pair_coverage: list
    per_pair_width: list
    per_level_calibration: list
    crossing_rows: int = 0
    metadata: dict = field(default_factory=dict)

    def scaled(self) -> dict:
        return {"eice_x100": self.eice * 100.0, "eis_x100": self.eis * 100.0,
                "tice_x100": self.tice * 100.0, "ece_x100": self.ece * 100.0}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(self.scaled())
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_fields(self) -> dict:
        row = {k: v for k, v in self.metadata.items() if not isinstance(v, (list, dict))}
        row.update({"eice": self.eice, "eis": self.eis, "tice": self.tice, "ece": self.ece,
                    "crossing_rows": self.crossing_rows})
        row.update(self.scaled())
        return row

    def to_csv(self) -> str:
        row = self.csv_fields()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()


def evaluate(Q, y, grid: QuantileGrid, metadata=None) -> EvalReport:
    if not grid.is_symmetric():
        raise ConfigError("interval metrics need a symmetric grid")
    Q, y = _check(Q, grid, y)
    return EvalReport(
        eice=eice(Q, y, grid), eis=eis(Q, grid), tice=tice(Q, y, grid), ece=ece(Q, y, grid),
        per_pair_coverage=pair_coverage(Q, y, grid).tolist(),
        per_pair_width=pair_width(Q, grid, absolute=False).tolist(),
        per_level_calibration=calibration_curve(Q, y, grid).tolist(),
        crossing_rows=int(np.sum(np.any(np.diff(Q, axis=1) <= 0.0, axis=1))),
        metadata=dict(metadata or {}),
    )
