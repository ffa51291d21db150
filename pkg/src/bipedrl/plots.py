"""Matplotlib report rendering: every run directory gets figures next to its
CSV output. Headless (Agg) by construction."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _col(rows, name, default=np.nan):
    out = []
    for r in rows:
        v = r.get(name, default)
        if v is None or v == "":
            v = default
        elif isinstance(v, str) and v in ("True", "False"):
            v = v == "True"
        out.append(float(v))
    return np.array(out)


def plot_training_curves(rows: list[dict], path: str, title: str = "training"):
    it = _col(rows, "iteration")
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    panels = [
        ("mean_episode_return", "episode return"),
        ("mean_reward", "mean step reward"),
        ("surrogate", "surrogate loss"),
        ("mean_progress", "episode progress (m)"),
    ]
    for ax, (key, label) in zip(axes.ravel(), panels):
        if rows and key in rows[0]:
            ax.plot(it, _col(rows, key), lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_distill_curves(rows: list[dict], path: str):
    it = _col(rows, "iteration")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].plot(it, _col(rows, "distill_loss"), lw=1.2)
    axes[0].set_ylabel("distillation loss")
    axes[0].set_yscale("log")
    axes[1].plot(it, _col(rows, "mse"), lw=1.2, label="action mse")
    axes[1].plot(it, _col(rows, "kl"), lw=1.2, label="kl")
    axes[1].legend()
    axes[2].plot(it, _col(rows, "gate0_walk"), lw=1.2, label="gate0 | walking")
    axes[2].plot(it, _col(rows, "gate0_recover"), lw=1.2, label="gate0 | recovery")
    axes[2].set_ylim(-0.05, 1.05)
    axes[2].legend()
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_finetune_curves(rows: list[dict], path: str, title: str = "fine-tuning"):
    it = _col(rows, "iteration")
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    axes[0].plot(it, _col(rows, "cos_sim"), lw=1.0)
    axes[0].set_ylabel("pre-surgery gradient cosine")
    axes[1].plot(it, _col(rows, "return_walk"), lw=1.2, label="walking")
    axes[1].plot(it, _col(rows, "return_recover"), lw=1.2, label="recovery")
    axes[1].set_ylabel("episode return")
    axes[1].legend()
    keys = [k for k in rows[0] if k.startswith("value_loss_")] if rows else []
    for k in keys:
        axes[2].plot(it, _col(rows, k), lw=0.9, label=k.replace("value_loss_", ""))
    axes[2].set_yscale("log")
    axes[2].set_ylabel("critic value loss")
    if keys:
        axes[2].legend(fontsize=7)
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_eval_report(trial_rows: list[dict], path: str, title: str = "evaluation"):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    dist = _col(trial_rows, "distance")
    succ = _col(trial_rows, "success") > 0
    axes[0].hist(dist, bins=16, color="#4878d0", edgecolor="k", alpha=0.8)
    axes[0].set_xlabel("traversal distance (m)")
    axes[0].set_ylabel("trials")
    axes[1].bar(["success", "failure"], [succ.sum(), (~succ).sum()],
                color=["#6acc64", "#d65f5f"])
    axes[1].set_ylabel("trials")
    fig.suptitle(f"{title}  (succ {succ.mean():.3f}, dist {dist.mean():.2f} m)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(arm_rows: dict[str, list[dict]], path: str):
    """Cross-arm comparison: cosine similarity, value losses, task returns."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    for arm, rows in arm_rows.items():
        it = _col(rows, "iteration")
        axes[0].plot(it, _col(rows, "cos_sim"), lw=1.0, label=arm)
        vkeys = [k for k in rows[0] if k.startswith("value_loss_")] if rows else []
        total_v = np.sum([_col(rows, k) for k in vkeys], axis=0)
        axes[1].plot(it, total_v, lw=1.0, label=arm)
        axes[2].plot(it, np.minimum(_col(rows, "return_walk"),
                                    _col(rows, "return_recover")), lw=1.0, label=arm)
    axes[0].set_ylabel("gradient cosine similarity")
    axes[1].set_ylabel("total critic value loss")
    axes[1].set_yscale("log")
    axes[2].set_ylabel("min(task returns)")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
