"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so identical inputs give identical PNG bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(log: dict[str, np.ndarray], path: str | os.PathLike, smooth: int = 25) -> None:
    """Training loss (raw and running mean) and learning rate against step."""
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    steps, loss = log["step"], log["loss"]
    if steps.size:
        ax.semilogy(steps, loss, color="0.75", lw=0.8, label="per step")
        if steps.size >= smooth:
            kernel = np.ones(smooth) / smooth
            ax.semilogy(steps[smooth - 1:], np.convolve(loss, kernel, mode="valid"), color="C0",
                        label=f"mean of {smooth}")
        ax.legend(frameon=False)
        ax_lr.plot(steps, log["lr"], color="C1")
    ax.set_ylabel("loss")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    _save(fig, path)


def psnr_vs_angle(angles: Sequence[float], psnrs: Sequence[float], path: str | os.PathLike,
                  threshold: float = 90.0) -> None:
    """Per-view PSNR against the smallest rotation to any input view."""
    angles = np.asarray(angles, dtype=float)
    psnrs = np.asarray(psnrs, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    finite = np.isfinite(psnrs)
    far = angles >= threshold
    ax.scatter(angles[finite & ~far], psnrs[finite & ~far], s=14, color="C0", label="interpolated")
    ax.scatter(angles[finite & far], psnrs[finite & far], s=14, color="C3", label="extrapolated")
    ax.axvline(threshold, color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("min rotation to an input view (deg)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xlim(0, 180)
    ax.legend(frameon=False)
    _save(fig, path)


def ablation_bars(labels: Sequence[str], values: Sequence[Sequence[float]], path: str | os.PathLike) -> None:
    """Held-out PSNR per seed for each configuration, with the median marked."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for i, vals in enumerate(values):
        vals = np.asarray(vals, dtype=float)
        ax.scatter(np.full(vals.size, i), vals, color=f"C{i}", s=18)
        ax.hlines(np.median(vals), i - 0.25, i + 0.25, color=f"C{i}")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlim(-0.6, len(labels) - 0.4)
    ax.set_ylabel("median held-out PSNR (dB)")
    _save(fig, path)
