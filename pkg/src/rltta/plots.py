"""SVG figures: agent reward curve and ROC curves. Output bytes depend only
on the data (fixed hash salt, no date stamp)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import metrics  # noqa: E402

_SVG_META = {"Date": None, "Creator": "rltta"}


def _save(fig, path) -> None:
    with plt.rc_context({"svg.hashsalt": "rltta", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def reward_curve(log, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(log.episodes, log.rewards, lw=0.4, alpha=0.35, color="0.5", label="episode reward")
    ax.plot(log.episodes, log.moving_average(), lw=1.5, label=f"moving mean ({log.window})")
    ax.axhline(0.0, lw=0.8, color="k", ls=":")
    ax.set_xlabel("episode")
    ax.set_ylabel("reward (loss decrease)")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def roc_curves(curves: dict, path, title: str = "") -> None:
    """``curves`` maps a legend label to ``(scores, labels)``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (scores, labels) in curves.items():
        fpr, tpr, _ = metrics.roc_curve(scores, labels)
        ax.plot(fpr, tpr, lw=1.2, label=f"{name} (AUC {metrics.auc(scores, labels):.3f})")
    ax.plot([0, 1], [0, 1], lw=0.8, color="k", ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
