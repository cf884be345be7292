"""Report emission: delimited outputs (CSV + JSON) and the matplotlib figures
rendered alongside them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .collection import RarityReport, Tier
from .pipeline import CleanStats
from .policy import PpoMetricsRow

__all__ = [
    "write_json",
    "write_csv",
    "save_rarity_figure",
    "save_clean_stats_figure",
    "save_loss_figure",
    "save_confusion_figure",
    "save_ppo_metrics_figure",
    "save_eval_figure",
]

_TIER_COLORS = {Tier.HIGH: "#c0392b", Tier.MEDIUM: "#e67e22", Tier.LOW: "#2980b9"}


def write_json(path: Path | str, payload) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_csv(path: Path | str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def save_rarity_figure(report: RarityReport, path: Path | str) -> None:
    """Rarity distribution colored by tier, rarest ranks on the left."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ranks = [row.rank for row in report.rows]
    scores = [row.rarity for row in report.rows]
    colors = [_TIER_COLORS[row.tier] for row in report.rows]
    ax.scatter(ranks, scores, c=colors, s=8)
    ax.set_xlabel("rank")
    ax.set_ylabel("rarity score")
    ax.set_title(f"{report.collection_id}: rarity by rank")
    handles = [
        plt.Line2D([], [], marker="o", linestyle="", color=color, label=tier.value)
        for tier, color in _TIER_COLORS.items()
    ]
    ax.legend(handles=handles, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_clean_stats_figure(stats: CleanStats, path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    stages = [s.stage for s in stats.stages]
    kept = [s.records_in - s.records_removed for s in stats.stages]
    removed = [s.records_removed for s in stats.stages]
    x = np.arange(len(stages))
    ax.bar(x, kept, color="#2980b9", label="kept")
    ax.bar(x, removed, bottom=kept, color="#c0392b", label="removed")
    ax.set_xticks(x, stages, rotation=20, ha="right")
    ax.set_ylabel("records")
    ax.set_title("cleaning stages")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(history: Sequence[float], path: Path | str, title: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(history, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_figure(
    matrix: np.ndarray, class_labels: Sequence[str], path: Path | str
) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    image = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(class_labels)), class_labels)
    ax.set_yticks(range(len(class_labels)), class_labels)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("prediction")
    ax.set_title("market-value confusion matrix")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center", fontsize=9)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ppo_metrics_figure(rows: Sequence[PpoMetricsRow], path: Path | str) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    iterations = [r.iteration for r in rows]
    axes[0, 0].plot(iterations, [r.mean_reward for r in rows], label="total")
    axes[0, 0].plot(iterations, [r.mean_r_mkt for r in rows], label="market", alpha=0.7)
    axes[0, 0].plot(iterations, [r.mean_r_aes for r in rows], label="aesthetic", alpha=0.7)
    axes[0, 0].plot(iterations, [r.mean_r_clip for r in rows], label="relevance", alpha=0.7)
    axes[0, 0].set_title("mean reward")
    axes[0, 0].legend(frameon=False, fontsize=8)
    axes[0, 1].plot(iterations, [r.mean_kl for r in rows])
    axes[0, 1].set_title("mean |KL| per token")
    axes[1, 0].plot(iterations, [r.policy_loss for r in rows])
    axes[1, 0].set_title("policy loss")
    axes[1, 1].plot(iterations, [r.critic_loss for r in rows])
    axes[1, 1].set_title("critic loss")
    for ax in axes[1]:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(rows: Sequence[dict], path: Path | str) -> None:
    """Grouped bars per variant for the three mean scores."""
    fig, ax = plt.subplots(figsize=(7, 4))
    variants = [row["variant"] for row in rows]
    metrics = ["mean_market_score", "mean_aesthetic_score", "mean_relevance"]
    labels = ["market value", "aesthetic", "relevance"]
    x = np.arange(len(variants))
    width = 0.25
    for offset, (metric, label) in enumerate(zip(metrics, labels)):
        values = [row[metric] for row in rows]
        ax.bar(x + (offset - 1) * width, values, width, label=label)
    ax.set_xticks(x, variants)
    ax.set_ylabel("mean score")
    ax.set_title("evaluation by policy variant")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
