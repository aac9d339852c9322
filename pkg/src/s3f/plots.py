"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    plt.rcParams.update({"font.size": 9, "axes.titlesize": 9, "axes.labelsize": 9})
    fig, axes = plt.subplots(1, ncols, figsize=(width, height or width * GOLDEN), squeeze=False)
    for ax in axes.ravel():
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes.ravel()


def loss_curves(rows: list[dict], path, keys=None):
    """Total and per-component losses against step (log scale)."""
    steps = np.array([r["step"] for r in rows])
    keys = keys or [k for k in rows[0] if k.startswith(("synth_", "real_"))]
    fig, (ax0, ax1) = _figure(9.0, 3.2, ncols=2)
    ax0.plot(steps, [r["total"] for r in rows], lw=0.8, color="k")
    ax0.set_yscale("log")
    ax0.set_xlabel("step")
    ax0.set_ylabel("total loss")
    for k in keys:
        ax1.plot(steps, np.maximum([float(r[k]) for r in rows], 1e-8), lw=0.6, label=k)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.legend(fontsize=6, ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_bars(rows: list[dict], path, columns=("chamfer_e3", "iou", "nc", "psnr_albedo", "psnr_shaded")):
    """One panel per metric, one bar per row label."""
    labels = [str(r.get("method", r.get("scene_id", i))) for i, r in enumerate(rows)]
    cols = [c for c in columns if any(c in r for r in rows)]
    fig, axes = _figure(2.2 * len(cols), 2.6, ncols=len(cols))
    for ax, c in zip(axes, cols):
        vals = [float(r.get(c, np.nan)) for r in rows]
        ax.bar(range(len(vals)), vals, color="0.4")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
        ax.set_title(c)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_row(images: list[np.ndarray], titles: list[str], path):
    fig, axes = _figure(2.0 * len(images), 2.3, ncols=len(images))
    for ax, im, t in zip(axes, images, titles):
        ax.imshow(np.clip(im, 0, 1), cmap=None if im.ndim == 3 else "gray", vmin=0, vmax=1)
        ax.set_title(t)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
