"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import QualityRow  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_log(records: Sequence[dict], path, window: int = 10) -> None:
    """Loss curves (raw and trailing-mean) plus the learning-rate schedule."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, height_ratios=(3, 1))
        iters = np.array([r["iter"] for r in records])
        for key, label in (("loss_total", "total"), ("loss_pix", "pixel L1"), ("loss_percep", "perceptual"),
                           ("loss_adv", "adversarial"), ("d_loss", "discriminator")):
            vals = [r.get(key) for r in records]
            if all(v is None or v == "" for v in vals):
                continue
            y = np.array([np.nan if v in (None, "") else float(v) for v in vals])
            kernel = np.ones(window) / window
            smooth = np.convolve(np.nan_to_num(y), kernel, mode="full")[: len(y)]
            smooth[: window - 1] = np.nan
            (line,) = ax_loss.plot(iters, y, alpha=0.25, lw=0.8)
            ax_loss.plot(iters, smooth, color=line.get_color(), lw=1.4, label=label)
        ax_loss.set_ylabel("loss")
        ax_loss.set_yscale("log")
        ax_loss.legend(frameon=False)
        ax_lr.step(iters, [float(r["lr"]) for r in records], where="post", color="k", lw=1)
        ax_lr.set_xlabel("iteration")
        ax_lr.set_ylabel("lr")
        _save(fig, path)


def plot_quality_report(rows: Sequence[QualityRow], path) -> None:
    """Per-image PSNR-Y, NIQE and (when available) perceptual index bars."""
    with plt.rc_context(RC):
        panels = [("psnr_y", "PSNR-Y (dB)"), ("niqe", "NIQE")]
        if any(r.ma is not None for r in rows):
            panels.append(("perceptual_index", "perceptual index"))
        fig, axes = plt.subplots(len(panels), 1, figsize=(max(4, 0.4 * len(rows) + 2), 2.2 * len(panels)),
                                 sharex=True, squeeze=False)
        names = [r.filename for r in rows]
        x = np.arange(len(rows))
        for ax, (attr, label) in zip(axes[:, 0], panels):
            vals = np.array([np.nan if getattr(r, attr) is None else getattr(r, attr) for r in rows], dtype=float)
            finite = np.where(np.isfinite(vals), vals, np.nan)
            ax.bar(x, np.nan_to_num(finite), color="0.45")
            for xi, v in zip(x, vals):
                if np.isinf(v):
                    ax.annotate("inf", (xi, 0), ha="center", va="bottom", fontsize=7)
            ax.set_ylabel(label)
        axes[-1, 0].set_xticks(x)
        axes[-1, 0].set_xticklabels(names, rotation=60, ha="right")
        _save(fig, path)
