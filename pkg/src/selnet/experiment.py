"""Config-driven training, evaluation and coverage sweeps.

Each ``(mode, target coverage, seed)`` cell trains one model and writes a
directory with ``record.json`` (config snapshot, per-epoch history, test
metrics), ``params.npz`` and ``scores.npz`` (test predictions, confidences
and targets in natural units).  A cell whose ``record.json`` exists is
treated as done.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import autodiff as ad
from .data import DataError, Dataset, PreprocessSpec, dataset_info, load_csv, preprocess, split, split_spec_for
from .evaluation import (
    TABLE_COVERAGES,
    RiskCoverageRow,
    ScoredPredictions,
    risk_coverage_curve,
    risk_coverage_report,
    write_report_csv,
)
from .nn import ARCHITECTURES, Adam, MultiStepLR, architecture, init_params, lr_at_epoch
from .selective import SelectiveLossConfig, SelectiveModel, TemperatureSchedule, predict, temperature_at_epoch, total_loss

log = logging.getLogger(__name__)

# offsets into the per-seed stream family
SPLIT_STREAM, INIT_STREAM, NOISE_STREAM, BATCH_STREAM = 0, 1, 2, 3

DOWNLOAD_HINT = (
    "dataset file not found: {path}\n"
    "Run `python scripts/prepare_datasets.py --out data` from the repository root "
    "to build data/concrete.csv, data/california_housing.csv and data/ames_train.csv, "
    "or point `data_path` (or --data) at your own copy ({source})."
)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


class TrainingError(RuntimeError):
    pass


def stream(seed: int, offset: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), offset])


def split_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), SPLIT_STREAM]).generate_state(1)[0])


# ------------------------------------------------------------------- config

_REQUIRED = {"name", "dataset", "architecture", "epochs", "lr_schedule", "seeds"}
_KNOWN = _REQUIRED | {
    "data_path",
    "selection_mode",
    "selection_modes",
    "target_coverage",
    "coverages",
    "lambda",
    "alpha",
    "loss",
    "batch_size",
    "optimizer",
    "temperature",
    "combine_train_val",
    "out",
}


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    architecture: str
    epochs: int
    lr_schedule: MultiStepLR
    seeds: list[int]
    data_path: str | None = None
    selection_mode: str = "gumbel"
    selection_modes: list[str] | None = None
    target_coverage: float = 1.0
    coverages: list[float] = field(default_factory=lambda: list(TABLE_COVERAGES))
    lam: float = 32.0
    alpha: float = 0.5
    loss: str = "squared"
    batch_size: int = 128
    optimizer: dict[str, Any] = field(default_factory=lambda: {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    combine_train_val: bool = True
    out: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = set(raw) - _KNOWN
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        for key in sorted(_REQUIRED):
            if key not in raw:
                raise ConfigError(f"{key}: required field missing")

        def get(key, kind, default=None):
            val = raw.get(key, default)
            if kind is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
                raise ConfigError(f"{key}: expected {kind.__name__}, got {type(val).__name__}")
            return val

        lr = get("lr_schedule", dict)
        try:
            sched = MultiStepLR(float(lr["initial"]), tuple(int(m) for m in lr.get("milestones", ())), float(lr.get("factor", 0.1)))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"lr_schedule: {e}") from None
        if sched.initial <= 0:
            raise ConfigError("lr_schedule.initial: must be > 0")
        temp = get("temperature", dict, {"initial": 30.0, "rate": 0.985, "step": 5})
        try:
            tsched = TemperatureSchedule(float(temp["initial"]), float(temp["rate"]), int(temp["step"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"temperature: {e}") from None
        seeds = get("seeds", list)
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        coverages = [float(c) for c in get("coverages", list, list(TABLE_COVERAGES))]
        if not coverages or any(not 0.0 < c <= 1.0 for c in coverages):
            raise ConfigError("coverages: expected values in (0, 1]")
        modes = raw.get("selection_modes")
        if modes is not None and (not isinstance(modes, list) or not modes):
            raise ConfigError("selection_modes: expected a non-empty list")
        opt = get("optimizer", dict, {"name": "adam"})
        if opt.get("name", "adam") != "adam":
            raise ConfigError(f"optimizer.name: only 'adam' is supported, got {opt.get('name')!r}")
        opt = {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, **opt}
        data_path = raw.get("data_path")
        if data_path is not None and not isinstance(data_path, str):
            raise ConfigError("data_path: expected a string")

        cfg = cls(
            name=get("name", str),
            dataset=get("dataset", str),
            architecture=get("architecture", str),
            epochs=get("epochs", int),
            lr_schedule=sched,
            seeds=list(seeds),
            data_path=data_path,
            selection_mode=get("selection_mode", str, "gumbel"),
            selection_modes=list(modes) if modes is not None else None,
            target_coverage=get("target_coverage", float, 1.0),
            coverages=coverages,
            lam=get("lambda", float, 32.0),
            alpha=get("alpha", float, 0.5),
            loss=get("loss", str, "squared"),
            batch_size=get("batch_size", int, 128),
            optimizer=opt,
            temperature=tsched,
            combine_train_val=get("combine_train_val", bool, True),
            out=get("out", str, "runs"),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            dataset_info(self.dataset)
        except DataError as e:
            raise ConfigError(f"dataset: {e}") from None
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture: unknown id {self.architecture!r}; known: {sorted(ARCHITECTURES)}")
        for mode in self.modes:
            if mode not in ("gumbel", "soft"):
                raise ConfigError(f"selection_mode: expected 'gumbel' or 'soft', got {mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2")
        checks = [
            ("target_coverage", 0.0 < self.target_coverage <= 1.0, "must be in (0, 1]"),
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("alpha", 0.0 <= self.alpha <= 1.0, "must be in [0, 1]"),
            ("loss", self.loss in ("squared", "absolute", "cross_entropy"), f"unknown base loss {self.loss!r}"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"{name}: {message}")

    @property
    def modes(self) -> list[str]:
        return list(self.selection_modes) if self.selection_modes else [self.selection_mode]

    def loss_config(self, mode: str, coverage: float) -> SelectiveLossConfig:
        return SelectiveLossConfig(coverage=coverage, lam=self.lam, alpha=self.alpha, mode=mode, loss=self.loss)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "name": self.name,
            "dataset": self.dataset,
            "architecture": self.architecture,
            "epochs": self.epochs,
            "lr_schedule": {
                "initial": self.lr_schedule.initial,
                "milestones": list(self.lr_schedule.milestones),
                "factor": self.lr_schedule.factor,
            },
            "seeds": list(self.seeds),
            "selection_mode": self.selection_mode,
            "target_coverage": self.target_coverage,
            "coverages": list(self.coverages),
            "lambda": self.lam,
            "alpha": self.alpha,
            "loss": self.loss,
            "batch_size": self.batch_size,
            "optimizer": dict(self.optimizer),
            "temperature": {"initial": self.temperature.initial, "rate": self.temperature.rate, "step": self.temperature.step},
            "combine_train_val": self.combine_train_val,
            "out": self.out,
        }
        if self.data_path is not None:
            out["data_path"] = self.data_path
        if self.selection_modes is not None:
            out["selection_modes"] = list(self.selection_modes)
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            if not hasattr(new, k):
                raise ConfigError(f"{k}: unknown config field")
            setattr(new, k, v)
        new.validate()
        return new


PRESETS = ("ccs-gumbel", "ccs-soft", "california-gumbel", "california-soft", "ames-gumbel", "ames-soft")


def preset_path(name: str) -> Path:
    return Path(str(resources.files("selnet") / "presets" / f"{name}.json"))


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    path = Path(path_or_preset)
    if not path.exists() and str(path_or_preset) in PRESETS:
        path = preset_path(str(path_or_preset))
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {path}: {e}") from None
    return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------------- data


@dataclass
class PreparedData:
    dataset: Dataset
    train: np.ndarray
    test: np.ndarray
    metric: str
    unit: float


def prepare_data(cfg: ExperimentConfig, seed: int, table=None) -> PreparedData:
    info = dataset_info(cfg.dataset)
    path = Path(cfg.data_path or info.default_path)
    if table is None:
        if not path.exists():
            raise FileNotFoundError(DOWNLOAD_HINT.format(path=path, source=info.source))
        table = load_csv(path)
    tr, va, te = split(table.n_rows, split_spec_for(info, split_seed(seed)))
    train = np.sort(np.concatenate([tr, va])) if cfg.combine_train_val else tr
    evaluate_on = te if cfg.combine_train_val else (va if len(va) else te)
    ds = preprocess(table, PreprocessSpec(target=info.target, drop=info.drop), train)
    return PreparedData(ds, train, evaluate_on, info.metric, info.metric_unit)


# ----------------------------------------------------------------- training


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing single row cannot go through train-mode batch norm
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def build_model(cfg: ExperimentConfig, in_features: int, seed: int, out_features: int = 1) -> SelectiveModel:
    rng = stream(seed, INIT_STREAM)
    backbone = init_params(architecture(cfg.architecture, in_features), rng)
    return SelectiveModel(backbone, out_features, rng)


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    coverage: list[float] = field(default_factory=list)
    tau: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def train_model(
    cfg: ExperimentConfig, mode: str, coverage: float, X: np.ndarray, y: np.ndarray, seed: int
) -> tuple[SelectiveModel, History]:
    loss_cfg = cfg.loss_config(mode, coverage)
    model = build_model(cfg, X.shape[1], seed)
    params = model.parameters()
    opt = Adam(params, cfg.optimizer["beta1"], cfg.optimizer["beta2"], cfg.optimizer["eps"])
    noise_rng = stream(seed, NOISE_STREAM)
    batch_rng = stream(seed, BATCH_STREAM)
    Y = y.reshape(len(y), -1)
    hist = History()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.lr_schedule, epoch)
        tau = temperature_at_epoch(cfg.temperature, epoch) if mode == "gumbel" else None
        loss_sum = cov_sum = 0.0
        seen = 0
        for idx in _batches(len(X), cfg.batch_size, batch_rng):
            with ad.Tape() as tape:
                f, g, h = model(ad.Tensor._wrap(X[idx]), train=True)
                parts = total_loss(loss_cfg, f, h, g, ad.Tensor._wrap(Y[idx]), tau=tau, rng=noise_rng)
            value = parts.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            grads = tape.gradient(parts.total, params)
            opt.step(grads, lr)
            loss_sum += value * len(idx)
            cov_sum += parts.coverage * len(idx)
            seen += len(idx)
        hist.loss.append(loss_sum / seen)
        hist.coverage.append(cov_sum / seen)
        hist.tau.append(tau)
        hist.lr.append(lr)
    return model, hist


def score(model: SelectiveModel, data: PreparedData, rows: np.ndarray) -> ScoredPredictions:
    ds = data.dataset
    f, g = predict(model, ds.X[rows])
    return ScoredPredictions(ds.inverse_target(f.reshape(-1)), g, ds.inverse_target(ds.y[rows]))


# -------------------------------------------------------------------- cells


def cell_dir(out: str | Path, mode: str, coverage: float, seed: int) -> Path:
    return Path(out) / mode / f"cov{int(round(coverage * 100)):03d}" / f"seed{seed}"


def run_cell(
    cfg: ExperimentConfig, mode: str, coverage: float, seed: int, out: str | Path, table=None
) -> dict[str, Any]:
    """Train, evaluate and persist one cell; returns the run record."""
    start = time.perf_counter()
    data = prepare_data(cfg, seed, table)
    model, hist = train_model(cfg, mode, coverage, data.dataset.X[data.train], data.dataset.y[data.train], seed)
    sp = score(model, data, data.test)
    curve = risk_coverage_curve(sp, sorted({*TABLE_COVERAGES, coverage}, reverse=True), data.metric, data.unit)
    at_target = curve[coverage]
    record = {
        "config": cfg.to_dict(),
        "cell": {"mode": mode, "target_coverage": coverage, "seed": seed},
        "dataset": cfg.dataset,
        "history": {"loss": hist.loss, "coverage": hist.coverage, "tau": hist.tau, "lr": hist.lr},
        "test": {
            "metric": data.metric,
            "unit": data.unit,
            "n_train": int(len(data.train)),
            "n_test": int(len(data.test)),
            "at_target": at_target,
            "calibrated": {str(int(round(c * 100))): v for c, v in curve.items()},
            "mean_confidence": float(sp.confidences.mean()),
            "fraction_above_half": float((sp.confidences >= 0.5).mean()),
        },
        "wall_clock_s": time.perf_counter() - start,
    }
    d = cell_dir(out, mode, coverage, seed)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / "params.npz", **model.state_dict())
    np.savez(d / "scores.npz", predictions=sp.predictions, confidences=sp.confidences, targets=sp.targets)
    tmp = d / "record.json.tmp"
    tmp.write_text(json.dumps(record, indent=1))
    os.replace(tmp, d / "record.json")
    return record


def load_scores(cell: Path) -> ScoredPredictions:
    with np.load(cell / "scores.npz") as z:
        return ScoredPredictions(z["predictions"], z["confidences"], z["targets"])


def _cells(cfg: ExperimentConfig, coverages: Iterable[float]) -> list[tuple[str, float, int]]:
    return [(m, c, s) for m in cfg.modes for c in coverages for s in cfg.seeds]


def _run_cell_job(args):
    cfg_dict, mode, coverage, seed, out = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    run_cell(cfg, mode, coverage, seed, out)
    return mode, coverage, seed


def run_cells(cfg: ExperimentConfig, cells: list[tuple[str, float, int]], out: str | Path, jobs: int = 1) -> None:
    todo = [c for c in cells if not (cell_dir(out, *c) / "record.json").exists()]
    skipped = len(cells) - len(todo)
    if skipped:
        log.info("skipping %d completed cells", skipped)
    if not todo:
        return
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        import multiprocessing as mp

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        payload = [(cfg.to_dict(), m, c, s, str(out)) for m, c, s in todo]
        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as pool:
            for mode, c, s in pool.map(_run_cell_job, payload):
                log.info("done %s c=%.2f seed=%d", mode, c, s)
        return
    info = dataset_info(cfg.dataset)
    path = Path(cfg.data_path or info.default_path)
    if not path.exists():
        raise FileNotFoundError(DOWNLOAD_HINT.format(path=path, source=info.source))
    table = load_csv(path)
    for mode, c, s in todo:
        rec = run_cell(cfg, mode, c, s, out, table)
        log.info("done %s c=%.2f seed=%d %s=%.4g (%.1fs)", mode, c, s, rec["test"]["metric"], rec["test"]["at_target"], rec["wall_clock_s"])


def sweep_report(cfg: ExperimentConfig, out: str | Path) -> list[RiskCoverageRow]:
    info = dataset_info(cfg.dataset)
    rows = []
    for mode in cfg.modes:
        for c in sorted(cfg.coverages, reverse=True):
            trials = [load_scores(cell_dir(out, mode, c, s)) for s in cfg.seeds]
            rows += risk_coverage_report(trials, [c], info.metric, info.metric_unit, method=mode, dataset=cfg.dataset)
    return rows


def run_sweep(cfg: ExperimentConfig, out: str | Path | None = None, jobs: int = 1) -> list[RiskCoverageRow]:
    """One model per (mode, coverage, seed); each evaluated at its own coverage."""
    out = Path(out or cfg.out)
    run_cells(cfg, _cells(cfg, cfg.coverages), out, jobs)
    rows = sweep_report(cfg, out)
    write_report_csv(rows, out / "report.csv")
    return rows


def run_train(cfg: ExperimentConfig, out: str | Path | None = None, jobs: int = 1) -> list[RiskCoverageRow]:
    """Train at the configured target coverage; report the risk-coverage curve."""
    out = Path(out or cfg.out)
    run_cells(cfg, _cells(cfg, [cfg.target_coverage]), out, jobs)
    info = dataset_info(cfg.dataset)
    rows = []
    for mode in cfg.modes:
        trials = [load_scores(cell_dir(out, mode, cfg.target_coverage, s)) for s in cfg.seeds]
        rows += risk_coverage_report(trials, TABLE_COVERAGES, info.metric, info.metric_unit, method=mode, dataset=cfg.dataset)
    write_report_csv(rows, out / "report.csv")
    return rows


def load_records(run_dir: str | Path) -> list[tuple[Path, dict[str, Any]]]:
    return [(p.parent, json.loads(p.read_text())) for p in sorted(Path(run_dir).rglob("record.json"))]


def report_from_records(run_dir: str | Path) -> list[RiskCoverageRow]:
    """Rebuild the table from the cells under ``run_dir``.

    With several trained coverages per method each cell is scored at its
    own coverage (sweep table); with one, the full curve is reported.
    """
    groups: dict[tuple[str, str], dict[float, list[Path]]] = {}
    meta: dict[str, tuple[str, float]] = {}
    for cell, rec in load_records(run_dir):
        key = (rec["cell"]["mode"], rec["dataset"])
        groups.setdefault(key, {}).setdefault(rec["cell"]["target_coverage"], []).append(cell)
        meta[rec["dataset"]] = (rec["test"]["metric"], rec["test"]["unit"])
    rows = []
    for (mode, dataset), by_cov in sorted(groups.items()):
        metric, unit = meta[dataset]
        if len(by_cov) == 1:
            ((c, cells),) = by_cov.items()
            rows += risk_coverage_report([load_scores(p) for p in cells], TABLE_COVERAGES, metric, unit, mode, dataset)
        else:
            for c in sorted(by_cov, reverse=True):
                rows += risk_coverage_report([load_scores(p) for p in by_cov[c]], [c], metric, unit, mode, dataset)
    return rows
