"""Figure rendering for reports. Headless backend; every function writes a PNG."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .importance import LayerScores
from .orchestrator import DeviceResult
from .sensitivity import DivergenceResult

_DPI = 120


def divergence_heatmap(result: DivergenceResult, path) -> None:
    n = len(result.task_ids)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
    im = ax.imshow(result.divergence, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), result.task_ids, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(n), result.task_ids, fontsize=8)
    ax.set_title("Pairwise ranking divergence (1 - tau) / 2")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def layer_profiles(profiles: list[tuple[str, LayerScores]], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, scores in profiles:
        ax.plot(range(len(scores.delta)), scores.delta, marker="o", label=label)
    ax.set_xlabel("layer")
    ax.set_ylabel("normalized layer importance")
    ax.set_title("Layer importance profiles")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def accuracy_bars(devices: list[DeviceResult], path) -> None:
    ok = [d for d in devices if d.failure is None]
    x = np.arange(len(ok))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(ok)), 4))
    ax.bar(x - width, [d.accuracy_before for d in ok], width, label="dense")
    ax.bar(x, [d.accuracy_after for d in ok], width, label="pruned")
    ax.bar(x + width, [d.accuracy_final for d in ok], width, label="pruned+finetuned")
    ax.set_xticks(x, [d.device_id for d in ok], rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("device test accuracy")
    ax.set_title("Per-device accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def budget_bars(per_layer: list[dict], path) -> None:
    layers = [row["layer"] for row in per_layer]
    eps = [row["epsilon"] for row in per_layer]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(layers, eps, color="tab:red")
    ax.set_xlabel("layer")
    ax.set_ylabel("pruning ratio")
    ax.set_title("Per-layer pruning budgets")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def grid_heatmap(table: list[dict], path) -> None:
    """Simplex grid as an alpha x beta matrix (gamma implied)."""
    alphas = sorted({row["alpha"] for row in table})
    betas = sorted({row["beta"] for row in table})
    grid = np.full((len(alphas), len(betas)), np.nan)
    for row in table:
        grid[alphas.index(row["alpha"]), betas.index(row["beta"])] = row[
            "weighted_accuracy"
        ]
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(grid, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(betas)), [f"{b:g}" for b in betas], fontsize=8)
    ax.set_yticks(range(len(alphas)), [f"{a:g}" for a in alphas], fontsize=8)
    ax.set_xlabel("beta (redundancy weight)")
    ax.set_ylabel("alpha (activeness weight)")
    ax.set_title("Grid search: weighted accuracy (gamma = 1 - alpha - beta)")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
