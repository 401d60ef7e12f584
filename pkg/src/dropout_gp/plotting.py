"""SVG rendering of normalized histograms and analytic density overlays."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stats_lab import histogram, normalize  # noqa: E402

__all__ = ["render_histogram_svg", "render_curves_svg"]

plt.rcParams["svg.hashsalt"] = "dropout-gp"


def _normal(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


def _laplace(x):
    # unit-variance Laplace
    return np.exp(-np.sqrt(2.0) * np.abs(x)) / np.sqrt(2.0)


OVERLAYS = {"normal": _normal, "laplace": _laplace}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_histogram_svg(samples, path, overlays=("normal", "laplace"), log=True, title=None,
                         zscore=True, bins=80):
    """Histogram of (z-scored) samples with optional N(0,1) / Laplace overlays."""
    x = normalize(samples) if zscore else np.asarray(samples, dtype=float)
    h = histogram(x, bins=bins)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    centers = 0.5 * (h.edges[1:] + h.edges[:-1])
    ax.step(centers, h.density, where="mid", color="k", lw=1, label="samples")
    grid = np.linspace(h.edges[0], h.edges[-1], 400)
    for name in overlays:
        ax.plot(grid, OVERLAYS[name](grid), lw=1, label=name)
    if log:
        ax.set_yscale("log")
        pos = h.density[h.density > 0]
        if pos.size:
            ax.set_ylim(pos.min() / 2, h.density.max() * 2)
    ax.set_xlabel("normalized pre-activation")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return h


def render_curves_svg(curves, path, log=True, xlabel="xi", ylabel="density"):
    """Line plot of ``{label: (x, y)}``."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, (x, y) in curves.items():
        ax.plot(x, y, lw=1, label=label)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    _save(fig, path)
