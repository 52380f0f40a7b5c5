"""Figure rendering for the CLI report paths.

Both figures are written with the Agg backend next to their delimited
counterparts: training curves beside ``metrics.csv`` and a per-type
importance bar chart beside the inspect CSV.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_training_curves(metrics, path: str) -> None:
    """Loss and accuracy curves over epochs; ``metrics`` is a list of
    EpochRecord."""
    epochs = [r.epoch for r in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.train_loss for r in metrics], label="train loss",
             color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r.train_acc for r in metrics], label="train acc")
    ax2.plot(epochs, [r.eval_acc for r in metrics], label="eval acc")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0.0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_importance_chart(class_names: list[str], scores: np.ndarray,
                            path: str) -> None:
    """Grouped bars: one group per class, four bars for the relation types."""
    scores = np.asarray(scores)
    n_classes, n_types = scores.shape
    x = np.arange(n_classes)
    width = 0.8 / n_types
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * n_classes, 3.5))
    for i in range(n_types):
        ax.bar(x + (i - (n_types - 1) / 2) * width, scores[:, i], width,
               label=f"type {i + 1}")
    ax.set_xticks(x)
    ax.set_xticklabels(class_names, rotation=20, ha="right")
    ax.set_ylabel("mean attention logit")
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend(ncol=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
