"""Report figures written next to the CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import to_rgb  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "figure.constrained_layout.use": True,
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)


def plot_training(rows, path, phase_switch=None, truth=None):
    """Loss, shell width and face parameters against iteration.

    ``rows`` are dicts with ``iteration``, ``loss``, ``eps`` and ``face_*`` keys.
    """
    it = np.array([r["iteration"] for r in rows], dtype=float)
    loss = np.array([r["loss"] for r in rows], dtype=float)
    eps = np.array([r["eps"] for r in rows], dtype=float)
    face_keys = sorted((k for k in rows[0] if k.startswith("face_")), key=lambda k: int(k.split("_")[1]))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        ax = axes[0]
        ax.semilogy(it, np.maximum(loss, 1e-12), lw=0.6, color="0.3")
        if len(loss) > 20:
            k = max(len(loss) // 50, 1)
            smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
            ax.semilogy(it[k - 1:], np.maximum(smooth, 1e-12), lw=1.2, color="C0")
        ax.set_xlabel("iteration")
        ax.set_ylabel("batch loss")
        axes[1].plot(it, eps, color="C1")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("shell width")
        ax = axes[2]
        for j, key in enumerate(face_keys):
            vals = np.array([r[key] for r in rows], dtype=float)
            if not np.any(vals) and (truth is None or not truth[j]):
                continue
            ax.plot(it, vals, lw=1.0, color=f"C{j % 10}", label=key)
            if truth is not None:
                ax.axhline(truth[j], color=f"C{j % 10}", ls=":", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("face parameter")
        if ax.lines:
            ax.legend(ncol=2, frameon=False)
        if phase_switch is not None:
            for a in axes:
                a.axvline(phase_switch, color="0.6", ls="--", lw=0.8)
        _save(fig, path)


def plot_metrics(rows, path):
    """Per-view PSNR and SSIM bars with the mean marked."""
    names = [r["view"] for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 1, figsize=(max(4, 0.3 * len(rows) + 2), 4), sharex=True)
        for ax, key, unit in ((axes[0], "psnr", "PSNR [dB]"), (axes[1], "ssim", "SSIM")):
            vals = np.array([min(r[key], 99.0) for r in rows])
            ax.bar(np.arange(len(vals)), vals, color="C0")
            ax.axhline(vals.mean(), color="C3", lw=1)
            ax.set_ylabel(unit)
        axes[1].set_xticks(np.arange(len(names)))
        axes[1].set_xticklabels(names, rotation=90)
        _save(fig, path)


def image_grid(rows, path, titles=None, background=(0.0, 0.0, 0.0), gain=1.0):
    """Grid of images; ``rows`` is a list of lists of RGB(A) arrays."""
    nr, nc = len(rows), max(len(r) for r in rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nr, nc, figsize=(1.8 * nc, 1.8 * nr), squeeze=False)
        for i, row in enumerate(rows):
            for j in range(nc):
                ax = axes[i][j]
                ax.axis("off")
                if j < len(row):
                    ax.imshow(np.clip(to_rgb(row[j], background) * gain, 0, 1), interpolation="nearest")
                    if titles is not None and i == 0 and j < len(titles):
                        ax.set_title(titles[j])
        _save(fig, path)
