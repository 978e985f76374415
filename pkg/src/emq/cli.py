"""Command-line driver: train, evaluate, benchmark, density and weights.

Every run writes one directory holding manifest.json, model.emqm, trace.csv,
report.json and report.csv. Nothing time- or path-dependent goes into those
files, so identical configurations give byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .baselines import DirectQuantileModel, direct_from_container, fit_direct, save_direct_model
from .data import Dataset, SplitIndices, load_csv, split_indices, standardize, synthesize
from .errors import ConfigError, DataError, DimensionError, EmqError, ModelFormatError, UserError
from .metrics import ece, evaluate, implied_density
from .model import AdaptiveTConfig, EnsembleStepConfig, fit_emq, model_from_container, save_model
from .nn import TrainConfig
from .quantiles import emqw_weights, monte_carlo_expected_pinball, parse_grid

log = logging.getLogger("emq")

EMQ_VARIANTS = ("emq0", "emq", "emqw")
BASELINE_LOSS = {"vanilla-qr": "vanilla", "qrw": "weighted", "interval-score": "interval-score"}
ALL_VARIANTS = EMQ_VARIANTS + tuple(BASELINE_LOSS)
OUTPUT_ROOT_ENV = "EMQ_OUTPUT_ROOT"
RUN_FILES = ("manifest.json", "model.emqm", "trace.csv", "report.json", "report.csv")


# Configuration

@dataclass
class RunConfig:
    data: dict
    variant: str = "emq"
    grid: object = "percent99"
    train: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    test_fraction: float = 0.2
    sort_baseline: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}; known fields: {sorted(known)}")
        if "data" not in d:
            raise ConfigError("config field 'data' is required")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.variant not in ALL_VARIANTS:
            raise ConfigError(f"variant: {self.variant!r} is not one of {ALL_VARIANTS}")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds: need a non-empty list of integers")
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError(f"seeds: entries must be non-negative integers, got {self.seeds}")
        if not isinstance(self.test_fraction, (int, float)) or not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction: must lie in (0, 1), got {self.test_fraction!r}")
        try:
            parse_grid(self.grid)
        except ConfigError as exc:
            raise ConfigError(f"grid: {exc}") from exc
        self.train_config(0)
        self.step_config()
        self.adaptive_config()
        self.data = _normalize_data_spec(self.data)

    def train_config(self, seed: int) -> TrainConfig:
        if "seed" in self.train:
            raise ConfigError("train.seed: set seeds at the top level instead")
        return _build("train", TrainConfig, {**self.train, "seed": seed})

    def step_config(self) -> EnsembleStepConfig:
        step = dict(self.step)
        if "weak_hidden_sizes" in step:
            step["weak_hidden_sizes"] = tuple(step["weak_hidden_sizes"])
        return _build("step", EnsembleStepConfig, step)

    def adaptive_config(self) -> AdaptiveTConfig:
        return _build("adaptive", AdaptiveTConfig, self.adaptive)

    def to_dict(self) -> dict:
        """Fully expanded form; defaults are written out so they hash the same as explicit values."""
        train = asdict(self.train_config(0))
        del train["seed"]
        step = asdict(self.step_config())
        step["weak_hidden_sizes"] = list(step["weak_hidden_sizes"])
        return {"data": dict(self.data), "variant": self.variant, "grid": parse_grid(self.grid).to_spec(),
                "train": train, "step": step, "adaptive": asdict(self.adaptive_config()),
                "seeds": list(self.seeds), "test_fraction": float(self.test_fraction),
                "sort_baseline": bool(self.sort_baseline)}

    def for_cell(self, variant: str, seed: int) -> "RunConfig":
        d = self.to_dict()
        d.update(variant=variant, seeds=[seed])
        return RunConfig.from_dict(d)

    def config_hash(self) -> str:
        return sha256_text(container.canonical_json(self.to_dict()))


def _build(section, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _normalize_data_spec(data) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("data: expected an object with 'csv' or 'synthetic'")
    if ("csv" in data) == ("synthetic" in data):
        raise ConfigError("data: give exactly one of 'csv' or 'synthetic'")
    if "csv" in data:
        extra = set(data) - {"csv", "label", "header"}
        if extra:
            raise ConfigError(f"data: unknown fields {sorted(extra)}")
        return {"csv": str(data["csv"]), "label": data.get("label", -1), "header": bool(data.get("header", True))}
    extra = set(data) - {"synthetic", "n", "seed"}
    if extra:
        raise ConfigError(f"data: unknown fields {sorted(extra)}")
    n, seed = data.get("n", 10_000), data.get("seed", 0)
    if not isinstance(n, int) or n < 10:
        raise ConfigError(f"data.n: need an integer >= 10, got {n!r}")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"data.seed: need a non-negative integer, got {seed!r}")
    return {"synthetic": str(data["synthetic"]), "n": n, "seed": seed}


def load_dataset(spec: dict) -> Dataset:
    if "csv" in spec:
        return load_csv(spec["csv"], spec["label"], spec["header"])
    try:
        return synthesize(spec["synthetic"], spec["n"], spec["seed"])
    except ConfigError as exc:
        raise ConfigError(f"data.synthetic: {exc}") from exc


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# Single run

def _prepare(cfg: RunConfig, seed: int, dataset: Dataset | None = None):
    dataset = dataset if dataset is not None else load_dataset(cfg.data)
    train_cfg = cfg.train_config(seed)
    idx = split_indices(dataset.n, cfg.test_fraction, seed, train_cfg.val_fraction)
    # normalization statistics come from the training portion only (train + validation rows)
    stats, _ = standardize(dataset.subset(np.concatenate([idx.train, idx.val])))
    return dataset, idx, stats, train_cfg


def _fold(dataset: Dataset, idx: SplitIndices, stats, fold: str):
    rows = {"train": idx.train, "val": idx.val, "test": idx.test}[fold]
    return stats.apply(dataset.subset(rows)), rows


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _fmt(x: float) -> str:
    return repr(float(x))


def load_any_model(path):
    magic, header, arrays = container.read_container(path)
    try:
        if magic == container.EMQ_MAGIC:
            return model_from_container(header, arrays)
        return direct_from_container(header, arrays)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path} has an incomplete header: {exc}") from exc


def _predict(model, X, sort_baseline: bool) -> np.ndarray:
    if isinstance(model, DirectQuantileModel):
        return model.predict_quantiles(X, sort=sort_baseline)
    return model.predict_quantiles(X)


def run_single(cfg: RunConfig, run_dir, dataset: Dataset | None = None) -> dict:
    """Train one (variant, seed) cell, evaluate on its test fold and write the run directory."""
    if len(cfg.seeds) != 1:
        raise ConfigError("run_single needs exactly one seed")
    seed = cfg.seeds[0]
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset, idx, stats, train_cfg = _prepare(cfg, seed, dataset)
    grid = parse_grid(cfg.grid)
    train, _ = _fold(dataset, idx, stats, "train")
    val, _ = _fold(dataset, idx, stats, "val")
    chash = cfg.config_hash()
    stamp = {"config_hash": chash, "seed": seed, "split_digest": idx.digest()}
    model_path = run_dir / "model.emqm"
    log.info("training %s seed %d on %d rows", cfg.variant, seed, train.n)

    if cfg.variant in EMQ_VARIANTS:
        model = fit_emq((train.features, train.labels), (val.features, val.labels), grid, cfg.variant,
                        train_cfg, cfg.step_config(), cfg.adaptive_config(), stats)
        save_model(model, model_path, stamp)
        trace = [(t, _fmt(e), int(t == model.T_ada)) for t, e in enumerate(model.trace)]
        summary = {"T_ada": model.T_ada, "t_prime": model.t_prime, "stopped_early": model.stopped_early}
    else:
        model = fit_direct((train.features, train.labels), (val.features, val.labels), train_cfg, grid,
                           BASELINE_LOSS[cfg.variant], norm_stats=stats)
        save_direct_model(model, model_path, stamp)
        e0 = ece(_predict(model, val.features, cfg.sort_baseline), val.labels, grid)
        trace = [(0, _fmt(e0), 1)]
        summary = {"T_ada": 0, "t_prime": 0, "stopped_early": False}
    _write_csv(run_dir / "trace.csv", ["t", "val_ece", "selected"], trace)

    manifest = {
        "config": cfg.to_dict(), "config_hash": chash, "seed": seed, "variant": cfg.variant,
        "dataset_fingerprint": dataset.fingerprint(), "dataset_rows": dataset.n, "n_features": dataset.d,
        "dropped_rows": dataset.dropped_rows, "split": idx.to_dict(), "split_digest": idx.digest(),
        "model_sha256": sha256_file(model_path), **summary,
    }
    manifest_text = container.canonical_json(manifest) + "\n"
    (run_dir / "manifest.json").write_text(manifest_text)
    report = _evaluate_fold(model, dataset, idx, stats, "test", grid, cfg.sort_baseline,
                            {**stamp, "variant": cfg.variant, "manifest_sha256": sha256_text(manifest_text)})
    _write_report(report, run_dir)
    return {"variant": cfg.variant, "seed": seed, "split_digest": idx.digest(), "report": report.to_dict(),
            **summary}


def _evaluate_fold(model, dataset, idx, stats, fold, grid, sort_baseline, metadata):
    data, _ = _fold(dataset, idx, stats, fold)
    Q = _predict(model, data.features, sort_baseline)
    return evaluate(Q, data.labels, grid, {**metadata, "fold": fold, "rows": data.n})


def _write_report(report, out_dir, stem="report") -> None:
    Path(out_dir, f"{stem}.json").write_text(report.to_json() + "\n")
    Path(out_dir, f"{stem}.csv").write_text(report.to_csv())


# Commands

def cmd_train(cfg: RunConfig, out_root) -> list[dict]:
    results = []
    for seed in cfg.seeds:
        cell = cfg.for_cell(cfg.variant, seed)
        results.append(run_single(cell, run_directory(out_root, cfg.variant, seed)))
    return results


def run_directory(out_root, variant: str, seed: int) -> Path:
    return Path(out_root) / f"{variant}-seed{seed}"


def _read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise UserError(f"{run_dir} is not a run directory (no manifest.json)")
    return json.loads(path.read_text())


def cmd_evaluate(run_dir, fold: str = "test", data_spec: dict | None = None, allow_train_eval: bool = False,
                 out_dir=None, sort_baseline: bool | None = None):
    """Evaluate a trained run on one of its folds, or on an external dataset."""
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    cfg = RunConfig.from_dict(manifest["config"])
    model = load_any_model(run_dir / "model.emqm")
    grid = model.grid
    sort = cfg.sort_baseline if sort_baseline is None else sort_baseline
    meta = {"config_hash": manifest["config_hash"], "seed": manifest["seed"], "variant": manifest["variant"],
            "manifest_sha256": sha256_file(run_dir / "manifest.json")}
    if data_spec is None:
        if fold in ("train", "val") and not allow_train_eval:
            raise UserError(f"refusing to evaluate on the {fold} fold the model was fitted with; "
                            "pass --allow-train-eval to override")
        dataset = load_dataset(cfg.data)
        if dataset.fingerprint() != manifest["dataset_fingerprint"]:
            raise DataError("the dataset no longer matches the one recorded in the manifest")
        idx = SplitIndices.from_dict(manifest["split"])
        report = _evaluate_fold(model, dataset, idx, model.norm_stats, fold, grid, sort, meta)
    else:
        dataset = load_dataset(_normalize_data_spec(data_spec))
        if dataset.fingerprint() == manifest["dataset_fingerprint"] and not allow_train_eval:
            raise UserError("this dataset is the one the model was trained on and includes its training rows; "
                            "pass --allow-train-eval to override")
        if dataset.d != manifest["n_features"]:
            raise DimensionError(f"model expects {manifest['n_features']} feature columns, data has {dataset.d}")
        data = model.norm_stats.apply(dataset)
        Q = _predict(model, data.features, sort)
        report = evaluate(Q, data.labels, grid, {**meta, "fold": "external", "rows": data.n,
                                                  "source": dataset.source})
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = "report" if (data_spec is None and fold == "test") else f"report-{fold if data_spec is None else 'external'}"
    _write_report(report, out, stem)
    return report


def _cell_job(args):
    cfg_dict, variant, seed, run_dir = args
    cfg = RunConfig.from_dict(cfg_dict).for_cell(variant, seed)
    try:
        return run_single(cfg, run_dir)
    except EmqError as exc:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        Path(run_dir, "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        return {"variant": variant, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


METRIC_FIELDS = ("eice", "eis", "tice", "ece")


def cmd_benchmark(cfg: RunConfig, variants, out_root, jobs: int = 1) -> tuple[list, list]:
    """Train and evaluate every (variant, seed) cell; returns (table rows, cell results)."""
    if not variants:
        raise ConfigError("benchmark needs at least one variant")
    for v in variants:
        if v not in ALL_VARIANTS:
            raise ConfigError(f"variants: {v!r} is not one of {ALL_VARIANTS}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs_list = [(cfg.to_dict(), v, s, str(run_directory(out_root, v, s))) for v in variants for s in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_cell_job, jobs_list))
    else:
        cells = [_cell_job(j) for j in jobs_list]

    digests = {}
    for c in cells:
        if "split_digest" in c:
            digests.setdefault(c["seed"], set()).add(c["split_digest"])
    if any(len(d) > 1 for d in digests.values()):
        raise EmqError("split indices differ across variants for the same seed")

    _write_csv(out_root / "benchmark_cells.csv",
               ["variant", "seed", "status", "split_digest", "T_ada", *(f"{m}_x100" for m in METRIC_FIELDS)],
               [[c["variant"], c["seed"], "ok" if "report" in c else f"FAILED {c['error']}",
                 c.get("split_digest", ""), c.get("T_ada", ""),
                 *(_fmt(c["report"][f"{m}_x100"]) if "report" in c else "" for m in METRIC_FIELDS)]
                for c in cells])
    table = []
    for v in variants:
        ok = [c["report"] for c in cells if c["variant"] == v and "report" in c]
        failed = sum(1 for c in cells if c["variant"] == v and "report" not in c)
        row = {"variant": v, "runs": len(ok), "failed": failed}
        for m in METRIC_FIELDS:
            vals = [r[f"{m}_x100"] for r in ok]
            row[f"{m}_x100_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{m}_x100_std"] = float(np.std(vals)) if vals else float("nan")
        table.append(row)
    header = list(table[0])
    _write_csv(out_root / "benchmark.csv", ["config_hash", *header],
               [[cfg.config_hash(), *(_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in header)]
                for r in table])
    return table, cells


def cmd_density(run_dir, rows, fold: str = "test", both: bool = False, out_path=None) -> Path:
    """Implied densities for selected rows of a fold, in original label units."""
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    cfg = RunConfig.from_dict(manifest["config"])
    model = load_any_model(run_dir / "model.emqm")
    dataset = load_dataset(cfg.data)
    idx = SplitIndices.from_dict(manifest["split"])
    data, _ = _fold(dataset, idx, model.norm_stats, fold)
    rows = list(rows)
    for r in rows:
        if not 0 <= r < data.n:
            raise UserError(f"row index {r} is outside the {fold} fold (0..{data.n - 1})")
    fans = model.predict_fans(data.features[rows])
    steps = [(0, fans[0]), (len(fans) - 1, fans[-1])] if both else [(len(fans) - 1, fans[-1])]
    if both and len(fans) == 1:
        steps = [(0, fans[0]), ("final", fans[0])]
    out_rows = []
    for step, Q in steps:
        raw = model.norm_stats.inverse_labels(Q)
        for i, r in enumerate(rows):
            dens = implied_density(raw[i], model.grid)
            for mid, val in zip(dens.midpoints, dens.density):
                out_rows.append([r, step, _fmt(mid), _fmt(val), int(dens.valid)])
    out_path = Path(out_path) if out_path else run_dir / f"density-{fold}.csv"
    _write_csv(out_path, ["row", "step", "midpoint", "density", "valid"], out_rows)
    return out_path


def cmd_weights(grid_spec="percent99", verify: bool = False, draws: int = 10_000_000, seed: int = 0):
    grid = parse_grid(grid_spec)
    w = emqw_weights(grid).w
    header = ["tau", "weight"]
    cols = [grid.taus, w]
    if verify:
        # the weight is the reciprocal of the expected pinball loss at the true quantile
        mc = 1.0 / monte_carlo_expected_pinball(grid.taus, draws, seed)
        header += ["weight_mc", "rel_dev"]
        cols += [mc, np.abs(mc / w - 1)]
    return header, [[_fmt(v) for v in row] for row in zip(*cols)]


# Argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags below override its values")
    p.add_argument("--csv", help="dataset CSV file")
    p.add_argument("--label", help="label column name or index (default: last column)")
    p.add_argument("--synthetic", help="synthetic law: hetero-gaussian, skewed or bimodal")
    p.add_argument("--n", type=int, help="synthetic sample size")
    p.add_argument("--data-seed", type=int, help="synthetic draw seed")
    p.add_argument("--grid", help="quantile grid: percent99, uniform(K) or a comma list")
    p.add_argument("--seeds", type=_int_list, help="comma-separated split/training seeds")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--T-max", type=int, dest="T_max")
    p.add_argument("--t1", type=int)
    p.add_argument("--t2", type=int)
    p.add_argument("--boundary-B", type=float, dest="boundary_B")
    p.add_argument("--sort-baseline", action="store_true", default=None,
                   help="re-sort baseline quantiles before evaluation (ablation only)")
    p.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./runs)")


def config_from_args(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UserError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    data = dict(d.get("data", {}))
    if args.csv:
        data = {"csv": args.csv, **({"label": data["label"]} if "label" in data and "csv" in data else {})}
    if args.synthetic:
        data = {"synthetic": args.synthetic}
    if args.label is not None:
        data["label"] = int(args.label) if args.label.lstrip("-").isdigit() else args.label
    if args.n is not None:
        data["n"] = args.n
    if args.data_seed is not None:
        data["seed"] = args.data_seed
    d["data"] = data
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    for key, section in (("grid", None), ("seeds", None), ("test_fraction", None), ("sort_baseline", None),
                         ("batch_size", "train"), ("learning_rate", "train"), ("max_epochs", "train"),
                         ("patience", "train"), ("val_fraction", "train"), ("T_max", "adaptive"),
                         ("t1", "adaptive"), ("t2", "adaptive"), ("boundary_B", "step")):
        value = getattr(args, key, None)
        if value is None:
            continue
        if section:
            d.setdefault(section, {})[key] = value
        else:
            d[key] = value
    if not d["data"]:
        raise ConfigError("data: pass --csv, --synthetic or a config with a 'data' field")
    return RunConfig.from_dict(d)


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emq", description="Ensemble multi-quantile regression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one variant for each seed")
    p.add_argument("--variant", choices=ALL_VARIANTS)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a trained run")
    p.add_argument("run_dir")
    p.add_argument("--fold", choices=("test", "val", "train"), default="test")
    p.add_argument("--data", help="external CSV to evaluate on instead of a fold")
    p.add_argument("--label", help="label column for --data")
    p.add_argument("--allow-train-eval", action="store_true")
    p.add_argument("--sort-baseline", action="store_true", default=None)
    p.add_argument("--out", help="directory for the report (default: the run directory)")

    p = sub.add_parser("benchmark", help="train and evaluate several variants over several seeds")
    p.add_argument("--variants", required=True, help="comma-separated variants")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _add_config_flags(p)

    p = sub.add_parser("density", help="export implied densities for selected rows")
    p.add_argument("run_dir")
    p.add_argument("--rows", type=_int_list, required=True, help="comma-separated row indices within the fold")
    p.add_argument("--fold", choices=("test", "val", "train"), default="test")
    p.add_argument("--both", action="store_true", help="also write the t=0 curve")
    p.add_argument("--out", help="output CSV path")

    p = sub.add_parser("weights", help="print the weighted-loss weight table")
    p.add_argument("--grid", default="percent99")
    p.add_argument("--verify", action="store_true", help="add a Monte-Carlo check column")
    p.add_argument("--draws", type=int, default=10_000_000)
    p.add_argument("--out", help="output CSV path (default: stdout)")
    return parser


def _dispatch(args) -> int:
    if args.command == "train":
        for r in cmd_train(config_from_args(args), _out_root(args)):
            rep = r["report"]
            print(f"{r['variant']} seed={r['seed']} T_ada={r['T_ada']} "
                  f"EICE={rep['eice_x100']:.3f} EIS={rep['eis_x100']:.3f} TICE={rep['tice_x100']:.3f} (x100)")
        return 0
    if args.command == "evaluate":
        spec = None
        if args.data:
            spec = {"csv": args.data}
            if args.label is not None:
                spec["label"] = int(args.label) if args.label.lstrip("-").isdigit() else args.label
        rep = cmd_evaluate(args.run_dir, args.fold, spec, args.allow_train_eval, args.out, args.sort_baseline)
        print(f"EICE={rep.eice * 100:.3f} EIS={rep.eis * 100:.3f} TICE={rep.tice * 100:.3f} (x100)")
        return 0
    if args.command == "benchmark":
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        table, cells = cmd_benchmark(config_from_args(args), variants, _out_root(args), args.jobs)
        for row in table:
            print(f"{row['variant']:>15} runs={row['runs']} failed={row['failed']} "
                  f"EICE={row['eice_x100_mean']:.3f} EIS={row['eis_x100_mean']:.3f} TICE={row['tice_x100_mean']:.3f}")
        if any("error" in c for c in cells):
            print("some cells failed; see benchmark_cells.csv (partial results)", file=sys.stderr)
            return 2
        return 0
    if args.command == "density":
        print(cmd_density(args.run_dir, args.rows, args.fold, args.both, args.out))
        return 0
    if args.command == "weights":
        header, rows = cmd_weights(args.grid, args.verify, args.draws)
        if args.out:
            _write_csv(args.out, header, rows)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EmqError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
