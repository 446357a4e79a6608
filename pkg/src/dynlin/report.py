"""Figure rendering for the command-line reports.

Everything draws through the non-interactive backend and lands in
files next to the delimited text output; nothing here feeds back into
the numerics.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .layers import (
    ActivationParams,
    activation_derivative,
    activation_multiplier,
    activation_value,
)


def save_heatmap(path, grid):
    """8-bit grayscale rendering of a 2-D map, bright = large."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    norm = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    img = np.round(norm * 255.0).astype(np.uint8)
    matplotlib.image.imsave(str(path), img, cmap="gray", vmin=0, vmax=255,
                            format="png")


def save_attribution_figure(path, raw_grid, post_grid, title="attribution"):
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
    for ax, data, name in zip(axes, (raw_grid, post_grid),
                              ("raw", "post-processed")):
        im = ax.imshow(data, cmap="magma")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)


def save_gelu_figure(path, points):
    """Curve of the gelu unit with its frozen multiplier and its gradient.

    ``points`` are the x positions to mark.
    """
    p = ActivationParams("gelu")
    xs = np.linspace(-5.0, 3.0, 400)
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(xs, activation_value(p, xs), label="gelu(x)")
    ax.plot(xs, activation_multiplier(p, xs), ":", label="multiplier(x)")
    ax.plot(xs, activation_derivative(p, xs), "--", label="gradient(x)")
    for x0 in points:
        ax.axvline(x0, color="gray", lw=0.8, alpha=0.6)
        ax.annotate(f"x={x0:g}", (x0, ax.get_ylim()[1] * 0.9), fontsize=8,
                    ha="right", rotation=90)
    ax.axhline(0.0, color="black", lw=0.6)
    ax.legend()
    ax.set_xlabel("x")
    ax.set_title("input-weighted multiplier vs gradient")
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)


def save_bench_chart(path, stats):
    """Bar chart of mean faithfulness per method with spread bars.

    ``stats`` maps method name to a list of scores.
    """
    names = list(stats)
    means = [float(np.mean(stats[n])) if stats[n] else 0.0 for n in names]
    stds = [float(np.std(stats[n])) if stats[n] else 0.0 for n in names]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(names, means, yerr=stds, capsize=4, color="#4878d0")
    ax.axhline(0.0, color="black", lw=0.6)
    ax.set_ylabel("faithfulness correlation")
    ax.set_title("perturbation benchmark")
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)
