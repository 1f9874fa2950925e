"""Figures written next to the CLI's tabular outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import Aggregate
from .trainer import TrainLog


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no version stamp, so reruns produce identical files
    fig.savefig(path, dpi=110, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_train_log(log: TrainLog, path, title: str = "") -> Path:
    steps = np.array([r["step"] for r in log.records])
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    ax = axes[0]
    for key, label in (("cls", "cross-entropy"), ("cls1", "cls original"), ("cls2", "cls perturbed"), ("sem", "semantic")):
        if key in log.records[0]:
            ax.plot(steps, [r[key] for r in log.records], label=label, lw=0.8)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.set_title("losses")
    ax.legend(fontsize=7)
    ax = axes[1]
    if "d_before" in log.records[0]:
        ax.plot(steps, [r["d_before"] for r in log.records], label="before ascent", lw=0.8)
        ax.plot(steps, [r["d_after"] for r in log.records], label="after ascent", lw=0.8)
        ax.legend(fontsize=7)
    else:
        ax.text(0.5, 0.5, "no max stage", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("step")
    ax.set_title("Gram discrepancy")
    ax = axes[2]
    if log.checkpoints:
        ax.plot([c["step"] for c in log.checkpoints], [c["val_acc"] for c in log.checkpoints], "o-")
    ax.set_xlabel("step")
    ax.set_title("source validation accuracy")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_feature_stats(rows: Sequence[tuple], path) -> Path:
    """Per-channel mean against std for each site, one colour per domain."""
    sites = sorted({r[1] for r in rows})
    domains = sorted({r[0] for r in rows})
    fig, axes = plt.subplots(1, len(sites), figsize=(4 * len(sites), 3.6), squeeze=False)
    for ax, site in zip(axes[0], sites):
        for d in domains:
            sel = [r for r in rows if r[0] == d and r[1] == site]
            ax.scatter([r[3] for r in sel], [r[4] for r in sel], s=9, label=f"domain {d}", alpha=0.75)
        ax.set_title(f"block {site}")
        ax.set_xlabel("channel mean")
        ax.set_ylabel("channel std")
    axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def plot_comparison(table: Dict[Tuple[str, int], Aggregate], path) -> Path:
    algorithms = list(dict.fromkeys(k[0] for k in table))
    domains = sorted({k[1] for k in table})
    width = 0.8 / max(len(algorithms), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(domains) * max(1, len(algorithms) / 2), 3.6))
    xs = np.arange(len(domains))
    for i, alg in enumerate(algorithms):
        means = [100 * table[(alg, d)].mean if (alg, d) in table else np.nan for d in domains]
        errs = [100 * table[(alg, d)].stderr if (alg, d) in table else 0 for d in domains]
        ax.bar(xs + (i - (len(algorithms) - 1) / 2) * width, means, width, yerr=errs, capsize=3, label=alg)
    ax.set_xticks(xs, [str(d) for d in domains])
    ax.set_xlabel("target domain")
    ax.set_ylabel("target accuracy (%)")
    ax.legend(fontsize=7)
    return _save(fig, path)
