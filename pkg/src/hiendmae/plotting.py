"""Static figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss(trace: Sequence[tuple[int, float, float]], path) -> Path:
    steps = [t[0] for t in trace]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(steps, [t[2] for t in trace], lw=1, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("masked MSE", color="C0")
        ax2 = ax.twinx()
        ax2.plot(steps, [t[1] for t in trace], lw=1, color="C1", ls="--")
        ax2.set_ylabel("learning rate", color="C1")
        fig.tight_layout()
        return _save(fig, path)


def plot_spectra(rows, path) -> Path:
    """Per-layer effective-rank distribution (left) and mean normalised spectra (right)."""
    by_layer: dict[int, list] = {}
    for _, rep in rows:
        by_layer.setdefault(rep.layer, []).append(rep)
    layers = sorted(by_layer)
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
        a1.boxplot([[r.effective_rank for r in by_layer[l]] for l in layers], tick_labels=[str(l) for l in layers])
        a1.set_xlabel("encoder layer")
        a1.set_ylabel("effective rank")
        cmap = plt.get_cmap("viridis")
        for i, l in enumerate(layers):
            k = min(len(r.sigma) for r in by_layer[l])
            mean = np.mean([r.sigma[:k] for r in by_layer[l]], axis=0)
            a2.semilogy(np.arange(1, k + 1), np.maximum(mean, 1e-12), color=cmap(i / max(len(layers) - 1, 1)),
                        lw=1, label=f"layer {l}")
        a2.set_xlabel("index")
        a2.set_ylabel("singular value")
        a2.legend(ncol=2, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_attention(amap: np.ndarray, path, title: str = "") -> Path:
    """All depth slices of a grid-shaped attention map side by side."""
    n = amap.shape[0]
    cols = min(n, 8)
    rows = int(np.ceil(n / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.4 * rows + 0.3), squeeze=False)
        vmax = float(amap.max()) or 1.0
        for k, ax in enumerate(axes.flat):
            ax.set_axis_off()
            if k < n:
                ax.imshow(amap[k], vmin=0, vmax=vmax, cmap="inferno", interpolation="nearest")
                ax.set_title(f"d={k}", fontsize=7)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_macs(rows: Sequence[dict], path, x_key: str = "gamma") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        xs = [r[x_key] for r in rows]
        ax.plot(xs, [r["decoder_macs"] / 1e9 for r in rows], "o-", label="encoder-driven decoder")
        ax.plot(xs, [r["baseline_decoder_macs"] / 1e9 for r in rows], "s--", label="decoder-driven baseline")
        ax.set_xlabel(x_key)
        ax.set_ylabel("GMAC")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_bench(rows: Sequence[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for variant, marker in (("mae_baseline", "s--"), ("hiend", "o-")):
            sel = [r for r in rows if r["variant"] == variant]
            ax.plot([r["gamma"] for r in sel], [r["median_s"] * 1e3 for r in sel], marker, label=variant)
        ax.set_xlabel("mask ratio")
        ax.set_ylabel("median forward time (ms)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
