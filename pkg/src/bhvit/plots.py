"""Figures for the observation experiments, rendered headless next to their CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _entropy(ax, rows):
    k = [r["k"] for r in rows]
    ax.plot(k, [r["ratio"] for r in rows], "o-", label="empirical H / ln k")
    ax.plot(k, [r["predicted"] / r["ln_k"] for r in rows], "s--", label="predicted / ln k")
    ax.set_xscale("log")
    ax.set_xlabel("tokens k")
    ax.set_ylabel("normalized softmax entropy")
    ax.legend()


def _demoivre(ax, rows):
    for r in rows:
        x = np.linspace(-3 * r["std"], 3 * r["std"], 200)
        ax.plot(x / r["std"], stats.norm.pdf(x, r["mean"], r["std"]) * r["std"],
                label=f"d={r['d']}  KS={r['ks']:.3f}")
    ax.set_xlabel("standardized score")
    ax.set_ylabel("fitted density")
    ax.legend()


def _gradient(ax, rows):
    w = np.array([r["zero_with"] for r in rows])
    wo = np.array([r["zero_without"] for r in rows])
    ax.scatter(wo, w, s=10)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8)
    ax.set_xlabel("zero fraction, no shortcut")
    ax.set_ylabel("zero fraction, with shortcut")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)


def _adam(ax, rows):
    t = np.array([r["t"] for r in rows])
    f = np.array([r["factor"] for r in rows])
    ax.plot(t, f)
    ax.set_xlabel("step t")
    ax.set_ylabel("moment scaling factor")


def _training(ax, rows):
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["flips_total"] for r in rows], "o-", label="flips")
    ax.set_xlabel("epoch")
    ax.set_ylabel("sign flips")
    ax.set_yscale("symlog")
    ax.legend()


PLOTTERS = {
    "entropy": _entropy,
    "demoivre": _demoivre,
    "gradient": _gradient,
    "adam": _adam,
    "training": _training,
}


def render(kind: str, rows: list[dict], path) -> Path:
    """Draw ``rows`` of experiment ``kind`` to an image file (format from the suffix)."""
    if kind not in PLOTTERS:
        raise KeyError(f"no figure for {kind!r}")
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        PLOTTERS[kind](ax, rows)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
