"""Report figures rendered to PNG files (headless matplotlib)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fsutil import atomic_write  # noqa: E402


def _save(fig, path: str) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def _label(variant: str, ht: bool) -> str:
    return f"{variant}+HT" if ht else variant


def bench_figure(rows, path: str, title: str = "5-way 1-shot meta-test accuracy") -> None:
    """Bar chart of (variant, ht, acc, ci) rows with CI error bars."""
    labels = [_label(v, ht) for v, ht, _, _ in rows]
    accs = [100 * a for _, _, a, _ in rows]
    cis = [100 * c for _, _, _, c in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 3.6))
    colors = ["tab:orange" if ht else "tab:blue" for _, ht, _, _ in rows]
    ax.bar(range(len(rows)), accs, yerr=cis, color=colors, capsize=4)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)")
    lo = min(accs) - max(cis, default=0) - 5 if accs else 0
    ax.set_ylim(max(0.0, lo), 100)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def convergence_figure(rows, path: str, title: str = "meta-validation accuracy") -> None:
    """Line plot of (iteration, variant, ht, val_acc) rows, one line per (variant, ht)."""
    series: dict = {}
    for it, v, ht, acc in rows:
        series.setdefault((v, ht), []).append((it, 100 * acc))
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for (v, ht), pts in series.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                linestyle="--" if ht else "-", label=_label(v, ht))
    ax.set_xlabel("meta-batch")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def pretrain_figure(curve, path: str, window: int = 100) -> None:
    """Training loss and accuracy, averaged over non-overlapping windows."""
    from .pretrain import smoothed

    loss = smoothed([c[2] for c in curve], window)
    acc = smoothed([c[3] for c in curve], window)
    xs = [window * (i + 1) for i in range(len(loss))]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(xs, loss, color="tab:red", label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(xs, acc, color="tab:blue", label="accuracy")
    ax2.set_ylabel("accuracy")
    ax.set_title("pre-training")
    _save(fig, path)
