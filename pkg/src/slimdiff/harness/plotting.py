"""Figures for run directories. Everything renders off-screen to PNG."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_curves(curves, out_dir, key: str = "rec", name: str = "curves.png") -> Path:
    """One line per stage for ``key`` (training loss) and ``val_rec`` where logged."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for st in curves.stages():
            it, v = curves.series(st, key)
            if it.size:
                axes[0].plot(it, v, label=st, lw=1)
            it, v = curves.series(st, "val_rec")
            if it.size:
                axes[1].plot(it, v, marker="o", ms=2.5, label=st, lw=1)
        axes[0].set(xlabel="iteration", ylabel=key, yscale="log", title="training loss")
        axes[1].set(xlabel="iteration", ylabel="L1", title="validation reconstruction")
        for ax in axes:
            if ax.lines:
                ax.legend(fontsize=7)
        return _save(fig, Path(out_dir) / name)


def plot_distill_terms(curves, out_dir, name: str = "distill_terms.png") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for st in curves.stages():
            for key, ls in (("mse_dis", "-"), ("mmd_dis", ":")):
                it, v = curves.series(st, key)
                if it.size and np.any(v > 0):
                    ax.plot(it, v, ls, lw=1, label=f"{st} {key}")
        ax.set(xlabel="iteration", ylabel="loss", yscale="log", title="distillation terms")
        if ax.lines:
            ax.legend(fontsize=7)
        return _save(fig, Path(out_dir) / name)


def plot_images(panels: dict, out_dir, name: str = "samples.png") -> Path:
    """Rows of images; ``panels`` maps a column title to a ``(B, 1, H, W)`` array."""
    cols = list(panels)
    rows = min(v.shape[0] for v in panels.values())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, len(cols), figsize=(1.8 * len(cols), 1.8 * rows), squeeze=False)
        for j, c in enumerate(cols):
            for i in range(rows):
                img = panels[c][i, 0]
                lim = (0, 1) if c != "log-variance" else (img.min(), img.max())
                axes[i, j].imshow(img, cmap="gray" if c != "log-variance" else "magma",
                                  vmin=lim[0], vmax=lim[1], interpolation="nearest")
                axes[i, j].set_xticks([])
                axes[i, j].set_yticks([])
            axes[0, j].set_title(c, fontsize=8)
        return _save(fig, Path(out_dir) / name)


def plot_ablation(report: dict, curves: dict, out_dir) -> list[Path]:
    out = []
    seeds = report["seeds"]
    per = report["per_seed"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        arms = list(per[0]["students"])
        x = np.arange(len(arms))
        for k, s in enumerate(per):
            axes[0].plot(x, [s["students"][a]["test"]["psnr"] for a in arms], "o-", lw=1,
                         label=f"seed {seeds[k]}")
        axes[0].set_xticks(x, arms)
        axes[0].set(ylabel="test PSNR (dB)", title="student arms")
        kinds = list(per[0]["teachers"])
        x = np.arange(len(kinds))
        for k, s in enumerate(per):
            axes[1].plot(x, [s["teachers"][t]["val"]["rec_l1"] for t in kinds], "o-", lw=1,
                         label=f"seed {seeds[k]}")
        axes[1].set_xticks(x, kinds)
        axes[1].set(ylabel="val L1", title="teacher timestep modes")
        for ax in axes:
            ax.legend(fontsize=7)
        out.append(_save(fig, Path(out_dir) / "ablation.png"))
    for seed, c in curves.items():
        out.append(plot_curves(c, out_dir, name=f"curves_seed{seed}.png"))
    return out
