#!/usr/bin/env python
"""Build the three regression CSVs under ``data/`` from PyPI-hosted copies.

The datasets ship inside these wheels (pinned below), so this works behind
a PyPI-only mirror:

* Concrete Compressive Strength (UCI, 1030 rows): ``rdatasets`` -> modeldata/concrete
* California Housing (20640 rows): ``pytorch-widedeep`` -> california_housing.parquet
* Ames Housing, Kaggle "House Prices" training file (1460 rows): rows are
  identified from ``shapash``'s copy of the Kaggle file, whose categorical
  codes are relabelled and sparse columns removed, and the raw values are
  recovered from the full De Cock table in ``rdatasets`` -> openintro/ames.

Needs pandas and pyarrow.  Usage: ``python scripts/prepare_datasets.py [--out data]``.
"""

from __future__ import annotations

import argparse
import re
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEELS = {
    "rdatasets": "0.2.10",
    "pytorch-widedeep": "1.7.0",
    "shapash": "2.8.1",
}

AMES_MATCH = [
    ("LotArea", "Lot.Area"),
    ("YearBuilt", "Year.Built"),
    ("YearRemodAdd", "Year.Remod.Add"),
    ("GrLivArea", "area"),
    ("SalePrice", "price"),
    ("YrSold", "Yr.Sold"),
    ("MoSold", "Mo.Sold"),
    ("TotalBsmtSF", "Total.Bsmt.SF"),
    ("GarageArea", "Garage.Area"),
    ("1stFlrSF", "X1st.Flr.SF"),
    ("2ndFlrSF", "X2nd.Flr.SF"),
    ("BsmtFinSF1", "BsmtFin.SF.1"),
    ("BsmtUnfSF", "Bsmt.Unf.SF"),
    ("WoodDeckSF", "Wood.Deck.SF"),
    ("OpenPorchSF", "Open.Porch.SF"),
    ("OverallQual", "Overall.Qual"),
    ("OverallCond", "Overall.Cond"),
]

# two Kaggle rows match a pair of near-identical De Cock duplexes on every
# numeric key; these categoricals tell them apart
EXTER_COND = {"Excellent": "Ex", "Good": "Gd", "Average/Typical": "TA", "Fair": "Fa", "Poor": "Po"}


def _download(dest: Path) -> dict[str, Path]:
    specs = [f"{name}=={ver}" for name, ver in WHEELS.items()]
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", str(dest), *specs],
        check=True,
    )
    found = {}
    for name in WHEELS:
        stem = name.replace("-", "_")
        (wheel,) = [p for p in dest.glob("*.whl") if p.name.lower().startswith(stem)]
        found[name] = wheel
    return found


def _extract(wheel: Path, member: str, dest: Path) -> Path:
    with zipfile.ZipFile(wheel) as z:
        return Path(z.extract(member, dest))


def kaggle_name(col: str) -> str:
    special = {"area": "GrLivArea", "price": "SalePrice"}
    if col in special:
        return special[col]
    name = col.replace(".", "")
    return re.sub(r"^X(?=\d)", "", name)


def build_concrete(rd: Path, tmp: Path) -> pd.DataFrame:
    df = pd.read_pickle(_extract(rd, "rdatasets/_data/modeldata/concrete.pkl.compress", tmp), compression="xz")
    return df.drop(columns=["rownames"])


def build_california(wd: Path, tmp: Path) -> pd.DataFrame:
    df = pd.read_parquet(_extract(wd, "pytorch_widedeep/datasets/data/california_housing.parquet.brotli", tmp))
    df = df.rename(columns={"MedHouseVal": "medianHouseValue"})
    # stored in units of $100,000; the original StatLib file is in dollars
    df["medianHouseValue"] = (df["medianHouseValue"] * 100000).round().astype(int)
    return df


def _break_ties(m: pd.DataFrame, kaggle: pd.DataFrame, full: pd.DataFrame) -> pd.DataFrame:
    labels = kaggle.set_index("Id")
    keep = []
    for _, group in m.groupby("Id", sort=False):
        if len(group) == 1:
            keep.append(group.index[0])
            continue
        ident = int(group["Id"].iloc[0])
        scores = []
        for idx, row in group.iterrows():
            src = full.iloc[int(row["_row"])]
            score = (EXTER_COND.get(labels.at[ident, "ExterCond"]) == src["Exter.Cond"]) + (
                labels.at[ident, "Exterior1st"] == src["Exterior.1st"]
            )
            scores.append((score, idx))
        scores.sort(reverse=True)
        if scores[0][0] == scores[1][0]:
            raise RuntimeError(f"ambiguous match for Kaggle Id {ident}")
        keep.append(scores[0][1])
    return m.loc[keep]


def build_ames(rd: Path, sh: Path, tmp: Path) -> pd.DataFrame:
    full = pd.read_pickle(_extract(rd, "rdatasets/_data/openintro/ames.pkl.compress", tmp), compression="xz")
    kaggle = pd.read_csv(_extract(sh, "data/house_prices_dataset.csv", tmp))
    left = kaggle[["Id"] + [k for k, _ in AMES_MATCH]].copy()
    right = full[[a for _, a in AMES_MATCH]].copy()
    right.columns = [k for k, _ in AMES_MATCH]
    right["_row"] = range(len(full))
    for k, _ in AMES_MATCH:
        left[k] = left[k].astype(float)
        right[k] = right[k].astype(float)
    m = left.merge(right, on=[k for k, _ in AMES_MATCH], how="left")
    m = _break_ties(m, kaggle, full)
    if m["_row"].isna().any() or m["Id"].duplicated().any() or m["_row"].duplicated().any():
        raise RuntimeError("could not match every Kaggle row to a unique De Cock row")
    raw = full.iloc[m["_row"].astype(int).to_numpy()].drop(columns=["rownames", "Order", "PID"])
    raw.columns = [kaggle_name(c) for c in raw.columns]
    raw.insert(0, "Id", m["Id"].to_numpy())
    raw = raw[[c for c in raw.columns if c != "SalePrice"] + ["SalePrice"]]
    return raw.sort_values("Id").reset_index(drop=True)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data", type=Path)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as td:
        tmp = Path(td)
        wheels = _download(tmp)
        rd, wd, sh = wheels["rdatasets"], wheels["pytorch-widedeep"], wheels["shapash"]
        outputs = {
            "concrete.csv": build_concrete(rd, tmp),
            "california_housing.csv": build_california(wd, tmp),
            "ames_train.csv": build_ames(rd, sh, tmp),
        }
        for name, df in outputs.items():
            path = args.out / name
            df.to_csv(path, index=False, na_rep="NA")
            print(f"wrote {path}: {len(df)} rows x {df.shape[1]} columns")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
