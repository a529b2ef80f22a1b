"""Evaluation plot and table emitters.

Plots are written as SVG with a fixed hash salt and no embedded date, so
re-running a report produces byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "marstag"

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def emit_reliability_svg(bins_rows: list[dict], path) -> None:
    """Reliability diagram: per-bin accuracy bars against the diagonal, with
    the prediction-count histogram underneath."""
    lows = np.array([r["bin_lo"] for r in bins_rows])
    highs = np.array([r["bin_hi"] for r in bins_rows])
    counts = np.array([r["count"] for r in bins_rows])
    accs = np.array([r["acc"] for r in bins_rows])
    centers = (lows + highs) / 2.0
    width = highs - lows
    fig, (ax, ax2) = plt.subplots(
        2, 1, figsize=(5, 6), height_ratios=[3, 1], sharex=True
    )
    ax.bar(centers, accs, width=width * 0.92, color="#c05020", edgecolor="black")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1)
    ax.set_ylabel("empirical accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title("Reliability")
    ax2.bar(centers, counts, width=width * 0.92, color="#444444")
    ax2.set_xlabel("predicted confidence")
    ax2.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def _iso_f1_curve(f1: float, n: int = 200) -> tuple[np.ndarray, np.ndarray]:
    # precision p as a function of recall r along constant F1: p = f r / (2r - f)
    r = np.linspace(f1 / (2 - f1) + 1e-6, 1.0, n)
    p = f1 * r / (2 * r - f1)
    keep = (p <= 1.0) & (p > 0)
    return r[keep], p[keep]


def emit_pr_scatter_svg(rows: list[dict], path) -> None:
    """Per-class precision/recall scatter with iso-F1 curves at 0.2 and 0.6."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for f1, color in ((0.2, "#bb2222"), (0.6, "#22aa22")):
        r, p = _iso_f1_curve(f1)
        ax.plot(r, p, color=color, linewidth=1, label=f"F1 = {f1}")
    for row in rows:
        ax.scatter(row["recall"], row["precision"], s=18, color="#333377")
        ax.annotate(
            row["class"],
            (row["recall"], row["precision"]),
            fontsize=6,
            xytext=(3, 3),
            textcoords="offset points",
        )
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower left", fontsize=7)
    ax.set_title("Per-class precision and recall")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def emit_confusion_svg(matrix: np.ndarray, classes: list[str], path) -> None:
    """Confusion-matrix heat table; the trailing column counts abstentions."""
    mat = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(mat, cmap="Oranges")
    cols = list(classes) + ["abstain"]
    ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right", fontsize=6)
    ax.set_yticks(range(len(classes)), classes, fontsize=6)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            if mat[i, j]:
                ax.text(j, i, int(mat[i, j]), ha="center", va="center", fontsize=6)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("Confusion matrix")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def emit_shift_svg(rows: list[dict], path) -> None:
    """Labeled-set versus archive class shares, side by side."""
    classes = [r["class"] for r in rows]
    labeled = [r["labeled_percent"] for r in rows]
    archive = [r["archive_percent"] for r in rows]
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, labeled, width=0.4, label="labeled", color="#7a4a2a")
    ax.bar(x + 0.2, archive, width=0.4, label="archive", color="#e08030")
    ax.set_xticks(x, classes, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("share of dataset (%)")
    ax.legend()
    ax.set_title("Class distribution: labeled vs archive")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [
        max(len(headers[i]), max((len(r[i]) for r in cells), default=0))
        for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"
