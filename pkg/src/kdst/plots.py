"""Matplotlib figures written next to the experiment's JSON/TSV reports."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_TITLES = {"ASR": "(a) ASR", "ST": "(b) end-to-end ST", "MT": "(c) MT", "ST+KD": "(d) ST with KD"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_attention_panels(panels: dict[str, np.ndarray], path, labels: dict[str, tuple] | None = None) -> Path:
    """One heatmap per model tag; each matrix is [target_len, source_len]."""
    tags = [t for t in PANEL_TITLES if t in panels] + [t for t in panels if t not in PANEL_TITLES]
    fig, axes = plt.subplots(1, len(tags), figsize=(3.4 * len(tags), 3.2), squeeze=False)
    for ax, tag in zip(axes[0], tags):
        m = panels[tag]
        ax.imshow(m, cmap="gray_r", vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
        ax.set_title(PANEL_TITLES.get(tag, tag), fontsize=10)
        ax.set_xlabel("source position")
        ax.set_ylabel("target position")
        if labels and tag in labels:
            rows, cols = labels[tag]
            if rows is not None:
                ax.set_yticks(range(len(rows)), rows, fontsize=7)
            if cols is not None:
                ax.set_xticks(range(len(cols)), cols, fontsize=7, rotation=90)
    fig.tight_layout()
    return _save(fig, path)


def plot_lambda_sweep(rows: list[dict], path) -> Path:
    """BLEU against the distillation weight, one line per seed plus the mean."""
    seeds = sorted({r["seed"] for r in rows})
    lams = sorted({r["lambda"] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.4))
    table = np.array([[next(r["bleu"] for r in rows if r["seed"] == s and r["lambda"] == lam) for lam in lams]
                      for s in seeds])
    for s, line in zip(seeds, table):
        ax.plot(lams, line, marker="o", lw=1, alpha=0.5, label=f"seed {s}")
    ax.plot(lams, table.mean(axis=0), marker="s", lw=2, color="k", label="mean")
    ax.set_xlabel("teacher weight λ")
    ax.set_ylabel("dev BLEU")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_training_curves(logs: dict[str, Path], path, key: str = "l_all") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for label, log_path in logs.items():
        recs = [json.loads(line) for line in Path(log_path).read_text(encoding="utf-8").splitlines() if line]
        ax.plot([r["step"] for r in recs], [r[key] for r in recs], lw=1, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_regime_bars(scores: dict[str, float], path, ylabel: str = "dev BLEU") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    names = list(scores)
    ax.bar(names, [scores[n] for n in names], color="0.6", edgecolor="k")
    for i, n in enumerate(names):
        ax.text(i, scores[n], f"{scores[n]:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", labelsize=8)
    return _save(fig, path)
