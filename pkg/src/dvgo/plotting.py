"""Matplotlib figures for the report paths of the command-line tool.

Everything renders off-screen with the Agg backend and is written straight
to a file; callers get the output path back.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (5.0, 3.4)
DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # A fixed metadata block keeps repeated runs byte-identical.
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_profile(x, s, t, c: float, delta_tol: float, path, title: str = "") -> Path:
    """Fitted alpha profile against the step target, with the tolerance band shaded."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.axvspan(c - delta_tol, c + delta_tol, color="0.9", label="tolerance band")
    ax.plot(x, t, color="0.3", lw=1.0, ls="--", label="target T(x)")
    ax.plot(x, s, color="tab:blue", lw=1.5, label="S(x)")
    ax.set_xlim(0, 1)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("x")
    ax.set_ylabel("alpha")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_cell(image: np.ndarray, path, title: str = "") -> Path:
    """Alpha over a single 2D cell, top edge at the top."""
    fig, ax = plt.subplots(figsize=(3.4, 3.4))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1, extent=(0, 1, 1, 0))
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_psnr_vs_stride(rows, path) -> Path:
    """``rows`` holds ``(target, mode, stride, psnr)``; one panel line per mode, averaged over targets."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    modes = sorted({r[1] for r in rows}, key=["pre", "in", "post"].index)
    for mode in modes:
        strides = sorted({r[2] for r in rows if r[1] == mode})
        means = [np.mean([r[3] for r in rows if r[1] == mode and r[2] == s]) for s in strides]
        ax.plot(strides, means, marker="o", label=f"{mode}-activation")
    ax.set_xlabel("grid stride (pixels)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_loss(traces: dict, path) -> Path:
    """Total loss per iteration for each named trace, log scale."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for name, trace in traces.items():
        if trace:
            ax.plot([r["iter"] for r in trace], [r["total"] for r in trace], lw=1.0, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_metrics(metrics, path) -> Path:
    """Per-view PSNR bars with SSIM on a twin axis."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    idx = np.arange(len(metrics))
    ax.bar(idx, [m[0] for m in metrics], color="tab:blue", width=0.6)
    ax.set_xlabel("test view")
    ax.set_ylabel("PSNR (dB)")
    ax2 = ax.twinx()
    ax2.plot(idx, [m[1] for m in metrics], color="tab:orange", marker="o", lw=1.0)
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1)
    ax.set_xticks(idx)
    return _save(fig, path)


def save_image_grid(images, labels, path, ncols: int = 3) -> Path:
    """Grayscale images side by side with short labels underneath."""
    n = len(images)
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.4 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img, label in zip(axes.ravel(), images, labels):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_title(label, fontsize=8)
    return _save(fig, path)
