"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so reruns give identical bytes
PNG_METADATA = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def confusion_figure(counts: np.ndarray, names: Sequence[str], path, title: str = "Confusion matrix") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
        im = ax.imshow(counts, cmap="Blues")
        ax.set_xticks(range(len(names)), labels=[str(i) for i in range(len(names))])
        ax.set_yticks(range(len(names)), labels=[f"{i} {n}" for i, n in enumerate(names)])
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        thresh = counts.max() / 2 if counts.size else 0
        for (i, j), v in np.ndenumerate(counts):
            ax.text(j, i, str(int(v)), ha="center", va="center", color="white" if v > thresh else "black", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        return _save(fig, path)


def curves_figure(curves: dict, names: Sequence[str], path, kind: str) -> Path:
    """One line per class. ``kind`` is ``"roc"`` or ``"pr"``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4.2))
        for c, cv in sorted(curves.items()):
            label = f"{c} {names[c]} ({'AUC' if kind == 'roc' else 'AP'}={cv.area:.3f})"
            if kind == "roc":
                ax.plot(cv.x, cv.y, lw=1.2, label=label)
            else:
                ax.step(np.r_[0.0, cv.x], np.r_[cv.y[0], cv.y], where="pre", lw=1.2, label=label)
        if kind == "roc":
            ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
            ax.set_xlabel("false positive rate")
            ax.set_ylabel("true positive rate")
            ax.set_title("ROC (one-vs-rest)")
        else:
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ax.set_title("Precision-recall (one-vs-rest)")
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.legend(loc="lower right" if kind == "roc" else "lower left")
        fig.tight_layout()
        return _save(fig, path)


def history_figure(history, path) -> Path:
    epochs = [r.epoch for r in history.records]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        a1.plot(epochs, [r.train_loss for r in history.records], marker="o", ms=3)
        a1.set_xlabel("epoch")
        a1.set_ylabel("train loss")
        a2.plot(epochs, [r.train_acc for r in history.records], marker="o", ms=3, label="train")
        a2.plot(epochs, [r.test_acc for r in history.records], marker="s", ms=3, label="test")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.legend()
        fig.tight_layout()
        return _save(fig, path)


def ablation_figure(rows: list[dict], path, backbone: str) -> Path:
    seeds = [r["seed"] for r in rows]
    x = np.arange(len(seeds))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.bar(x - 0.2, [r["baseline_acc"] for r in rows], width=0.4, label=backbone)
        ax.bar(x + 0.2, [r["acam_acc"] for r in rows], width=0.4, label=f"ACAM-{backbone}")
        ax.set_xticks(x, labels=[str(s) for s in seeds])
        ax.set_xlabel("seed")
        ax.set_ylabel("test accuracy")
        lo = min(min(r["baseline_acc"], r["acam_acc"]) for r in rows)
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def views_figure(source: np.ndarray, views: np.ndarray, alphas: np.ndarray, path) -> Path:
    k = len(views)
    cols = min(k + 1, 6)
    nrows = int(np.ceil((k + 1) / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, cols, figsize=(1.6 * cols, 1.8 * nrows), squeeze=False)
        panels = [(source, "source")] + [(v, f"a={a:.3f}") for v, a in zip(views, alphas)]
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (img, title) in zip(axes.ravel(), panels):
            ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1)
            ax.set_title(title, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
