"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import RiskCoverageRow  # noqa: E402

METRIC_LABELS = {"mse": "MSE", "mae": "MAE (10,000's)", "accuracy": "accuracy"}
STYLE = {"gumbel": dict(color="tab:blue", marker="o"), "soft": dict(color="tab:orange", marker="s")}
LABELS = {"gumbel": "Gumbel-softmax", "soft": "soft relaxation"}


def plot_risk_coverage(rows: Sequence[RiskCoverageRow], path: str | Path) -> Path:
    """One panel per dataset; error bars are the across-trial std."""
    datasets = sorted({r.dataset for r in rows})
    fig, axes = plt.subplots(1, len(datasets), figsize=(4.2 * len(datasets), 3.4), squeeze=False)
    for ax, ds in zip(axes[0], datasets):
        sub = [r for r in rows if r.dataset == ds]
        for method in sorted({r.method for r in sub}):
            pts = sorted((r for r in sub if r.method == method), key=lambda r: r.coverage)
            ax.errorbar(
                [r.coverage for r in pts],
                [r.mean for r in pts],
                yerr=[r.std for r in pts],
                capsize=3,
                label=LABELS.get(method, method),
                **STYLE.get(method, {}),
            )
        ax.set_title(ds)
        ax.set_xlabel("coverage (%)")
        ax.set_ylabel(METRIC_LABELS.get(sub[0].metric, sub[0].metric))
        ax.invert_xaxis()
        ax.grid(alpha=0.3)
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(records: Sequence[dict[str, Any]], path: str | Path) -> Path:
    """Per-epoch loss, batch coverage and temperature, averaged per group."""
    groups: dict[str, list[dict[str, Any]]] = {}
    for rec in records:
        key = f"{rec['cell']['mode']} c={rec['cell']['target_coverage']:.2f}"
        groups.setdefault(key, []).append(rec["history"])
    fig, (ax_loss, ax_cov, ax_tau) = plt.subplots(1, 3, figsize=(12, 3.4))
    for key, hists in sorted(groups.items()):
        loss = np.mean([h["loss"] for h in hists], axis=0)
        cov = np.mean([h["coverage"] for h in hists], axis=0)
        ax_loss.plot(loss, label=key, lw=1)
        ax_cov.plot(cov, lw=1)
        tau = [t for t in hists[0]["tau"] if t is not None]
        if tau:
            ax_tau.plot(tau, lw=1)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("training loss")
    ax_cov.set_ylabel("batch coverage")
    ax_tau.set_ylabel("temperature")
    for ax in (ax_loss, ax_cov, ax_tau):
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    ax_loss.legend(frameon=False, fontsize=6, ncol=2)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
