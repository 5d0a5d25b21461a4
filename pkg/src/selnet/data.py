"""CSV ingestion, train-fitted preprocessing and seeded splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

MISSING_MARKERS = frozenset({"", "NA"})
UNSEEN = "__unseen__"
VAR_EPS = 1e-12


class DataError(ValueError):
    pass


@dataclass
class RawTable:
    """Rectangular table of raw cells; ``None`` marks a missing cell."""

    columns: list[str]
    kinds: dict[str, Literal["numeric", "categorical"]]
    cells: dict[str, list[str | None]]

    @property
    def n_rows(self) -> int:
        return len(self.cells[self.columns[0]]) if self.columns else 0

    def column(self, name: str) -> list[str | None]:
        return self.cells[name]


def _is_number(s: str) -> bool:
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def infer_kind(values: Sequence[str | None]) -> str:
    present = [v for v in values if v is not None]
    return "numeric" if present and all(_is_number(v) for v in present) else "categorical"


def load_csv(path: str | Path) -> RawTable:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot open ({e.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        except csv.Error as e:
            raise DataError(f"{path}: line 1: {e}") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: line 1: duplicate column names")
        cols: list[list[str | None]] = [[] for _ in header]
        try:
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
                for j, cell in enumerate(row):
                    cell = cell.strip()
                    cols[j].append(None if cell in MISSING_MARKERS else cell)
        except csv.Error as e:
            raise DataError(f"{path}: line {reader.line_num}: {e}") from None
    if not cols or not cols[0]:
        raise DataError(f"{path}: no data rows")
    cells = dict(zip(header, cols))
    kinds = {name: infer_kind(vals) for name, vals in cells.items()}
    return RawTable(header, kinds, cells)


@dataclass(frozen=True)
class PreprocessSpec:
    target: str
    drop: tuple[str, ...] = ()
    one_hot: bool = True
    standardize: bool = True
    scale_target: bool = True


@dataclass
class Dataset:
    """Preprocessed features and targets for every row of the source table.

    All statistics were fitted on ``fit_rows`` only.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    fit_rows: np.ndarray
    numeric_means: dict[str, float] = field(default_factory=dict)
    categorical_modes: dict[str, str] = field(default_factory=dict)
    vocabularies: dict[str, list[str]] = field(default_factory=dict)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    target_mean: float = 0.0
    target_std: float = 1.0

    def inverse_target(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.target_std + self.target_mean

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def _column_floats(values: Sequence[str | None]) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values])


def preprocess(raw: RawTable, spec: PreprocessSpec, fit_rows: Sequence[int]) -> Dataset:
    fit = np.asarray(fit_rows, dtype=np.int64)
    if fit.size == 0:
        raise DataError("preprocess: fit_rows is empty")
    missing = [c for c in (spec.target, *spec.drop) if c not in raw.kinds]
    if missing:
        raise DataError(f"preprocess: columns not in table: {missing}")
    if raw.kinds[spec.target] != "numeric":
        raise DataError(f"preprocess: target column {spec.target!r} is not numeric")
    y = _column_floats(raw.column(spec.target))
    if np.isnan(y).any():
        raise DataError(f"preprocess: target column {spec.target!r} has missing values")

    ds = Dataset(np.empty((raw.n_rows, 0)), y, [], fit)
    blocks: list[np.ndarray] = []
    for name in raw.columns:
        if name == spec.target or name in spec.drop:
            continue
        values = raw.column(name)
        if raw.kinds[name] == "numeric":
            col = _column_floats(values)
            fitted = col[fit]
            if np.isnan(fitted).all():
                raise DataError(f"preprocess: numeric column {name!r} is missing on every fit row")
            mu = float(np.nanmean(fitted))
            ds.numeric_means[name] = mu
            blocks.append(np.where(np.isnan(col), mu, col)[:, None])
            ds.feature_names.append(name)
        elif spec.one_hot:
            present = [values[i] for i in fit if values[i] is not None]
            vocab = sorted(set(present))
            if present:
                counts: dict[str, int] = {}
                for v in present:
                    counts[v] = counts.get(v, 0) + 1
                # ties go to the lexicographically smallest level
                mode = min(vocab, key=lambda v: (-counts[v], v))
            else:
                mode = UNSEEN
            ds.categorical_modes[name] = mode
            ds.vocabularies[name] = vocab
            index = {v: j for j, v in enumerate(vocab)}
            block = np.zeros((raw.n_rows, len(vocab) + 1))
            for i, v in enumerate(values):
                v = mode if v is None else v
                block[i, index.get(v, len(vocab))] = 1.0
            blocks.append(block)
            ds.feature_names.extend([f"{name}={v}" for v in vocab] + [f"{name}={UNSEEN}"])
    X = np.hstack(blocks) if blocks else np.empty((raw.n_rows, 0))

    if spec.standardize:
        mu = X[fit].mean(axis=0)
        var = X[fit].var(axis=0)
        sd = np.sqrt(var)
        safe = np.where(var > VAR_EPS, sd, 1.0)
        X = np.where(var > VAR_EPS, (X - mu) / safe, 0.0)
        ds.feature_mean, ds.feature_std = mu, sd
    if spec.scale_target:
        ds.target_mean = float(y[fit].mean())
        sd = float(y[fit].std())
        ds.target_std = sd if sd**2 > VAR_EPS else 1.0
        ds.y = (y - ds.target_mean) / ds.target_std
    ds.X = X
    return ds


@dataclass(frozen=True)
class SplitSpec:
    """Seeded shuffle, then contiguous train/val/test slices.

    ``fractions`` mode rounds the train and val sizes and gives the rest to
    test; ``counts`` mode takes the sizes literally.
    """

    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    mode: Literal["fraction", "count"] = "fraction"
    counts: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.mode == "fraction":
            if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
                raise DataError(f"split fractions must be non-negative and sum to 1, got {self.fractions}")
        elif self.mode == "count":
            if self.counts is None or any(c < 0 for c in self.counts):
                raise DataError(f"count split needs three non-negative counts, got {self.counts}")
        else:
            raise DataError(f"unknown split mode {self.mode!r}")


def split(m: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if m < 3:
        raise DataError(f"split: need at least 3 rows, got {m}")
    if spec.mode == "count":
        sizes = list(spec.counts)
        if sum(sizes) != m:
            raise DataError(f"split: counts {tuple(sizes)} do not sum to {m} rows")
        wanted = [c > 0 for c in sizes]
    else:
        n_train = int(round(spec.fractions[0] * m))
        n_val = int(round(spec.fractions[1] * m))
        sizes = [n_train, n_val, m - n_train - n_val]
        wanted = [f > 0 for f in spec.fractions]
    for name, size, want in zip(("train", "val", "test"), sizes, wanted):
        if want and size <= 0:
            raise DataError(f"split: {name} split is empty for {m} rows")
        if size < 0:
            raise DataError(f"split: fractions overflow {m} rows")
    order = np.random.default_rng(spec.seed).permutation(m)
    a, b = sizes[0], sizes[0] + sizes[1]
    return np.sort(order[:a]), np.sort(order[a:b]), np.sort(order[b:])


# dataset registry: columns to drop, target and split protocol
@dataclass(frozen=True)
class DatasetInfo:
    name: str
    target: str
    drop: tuple[str, ...]
    split_mode: Literal["fraction", "count"]
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    counts: tuple[int, int, int] | None = None
    metric: str = "mse"
    metric_unit: float = 1.0
    default_path: str = ""
    source: str = ""


DATASETS = {
    "concrete": DatasetInfo(
        "concrete",
        target="compressive_strength",
        drop=(),
        split_mode="fraction",
        fractions=(0.6, 0.2, 0.2),
        metric="mse",
        default_path="data/concrete.csv",
        source="UCI Concrete Compressive Strength (1030 rows)",
    ),
    "california": DatasetInfo(
        "california",
        target="medianHouseValue",
        drop=(),
        split_mode="fraction",
        # 80/20 train/test, with 20% of train held out for tuning
        fractions=(0.64, 0.16, 0.2),
        metric="mae",
        metric_unit=10000.0,
        default_path="data/california_housing.csv",
        source="California Housing (20640 rows, target in dollars)",
    ),
    "ames": DatasetInfo(
        "ames",
        target="SalePrice",
        drop=("Id", "Alley", "PoolQC", "MiscFeature", "Fence", "GarageYrBlt"),
        split_mode="count",
        # 1022 train (70/30 train/val for tuning) and 438 test
        counts=(715, 307, 438),
        metric="mae",
        metric_unit=10000.0,
        default_path="data/ames_train.csv",
        source="Ames Housing, Kaggle House Prices training file (1460 rows)",
    ),
    # small fixture-style tables: numeric/categorical features plus `target`
    "synthetic": DatasetInfo(
        "synthetic",
        target="target",
        drop=(),
        split_mode="fraction",
        fractions=(0.6, 0.2, 0.2),
        metric="mse",
        default_path="tests/fixtures/tiny.csv",
        source="any CSV with a numeric `target` column",
    ),
}


def dataset_info(name: str) -> DatasetInfo:
    try:
        return DATASETS[name]
    except KeyError:
        raise DataError(f"unknown dataset {name!r}; known: {sorted(DATASETS)}") from None


def split_spec_for(info: DatasetInfo, seed: int) -> SplitSpec:
    if info.split_mode == "count":
        return SplitSpec(seed=seed, mode="count", counts=info.counts)
    return SplitSpec(fractions=info.fractions, seed=seed)
