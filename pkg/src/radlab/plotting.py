"""Figures written next to the delimited reports (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

VARIANT_COLORS = {"base": "#4c72b0", "+SS": "#dd8452", "+RA": "#55a868", "+SS+RA": "#c44e52"}


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata so identical runs give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training(report, path: str | Path) -> None:
    """Per-epoch losses on the left, the p and lambda schedules on the right."""
    epochs = [e["epoch"] + 1 for e in report.epochs]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_sched) = plt.subplots(1, 2, figsize=(8, 3))
        for key, label in (("loss_M", "NLL"), ("loss_RA", "RA MSE"), ("loss_total", "total")):
            vals = [e[key] for e in report.epochs]
            if key == "loss_RA" and not any(vals):
                continue
            ax_loss.plot(epochs, vals, marker="o", ms=3, label=label)
        ax_loss.set_yscale("log")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.set_title(f"{report.variant} (seed {report.seed})")
        ax_loss.legend()

        steps = np.arange(len(report.lambda_trajectory))
        ax_sched.plot(steps, report.lambda_trajectory, label="lambda (per step)")
        if report.epochs:
            per_epoch = len(report.lambda_trajectory) / len(report.epochs)
            ax_sched.step([e["epoch"] * per_epoch for e in report.epochs], [e["p"] for e in report.epochs],
                          where="post", label="p (per epoch)")
        ax_sched.set_ylim(0, 1.05)
        ax_sched.set_xlabel("optimizer step")
        ax_sched.legend()
        _save(fig, path)


def plot_ablation(result, path: str | Path) -> None:
    """Grouped bars, one group per metric, one bar per variant."""
    from .train import METRIC_COLUMNS

    names = list(result.table)
    width = 0.8 / len(names)
    x = np.arange(len(METRIC_COLUMNS))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3))
        for i, name in enumerate(names):
            ax.bar(x + (i - (len(names) - 1) / 2) * width, result.table[name].row(), width,
                   label=name, color=VARIANT_COLORS.get(name))
        ax.set_xticks(x)
        ax.set_xticklabels(METRIC_COLUMNS)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(f"mean over {len(result.seeds)} seed(s)")
        ax.legend(ncol=len(names), loc="upper center", bbox_to_anchor=(0.5, 1.15), frameon=False)
        _save(fig, path)
