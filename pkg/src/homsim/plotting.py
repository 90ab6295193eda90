"""PNG figures for the report path: histograms with fit overlays and scan curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from . import fit as fitmod
from . import models
from .correlate import Histogram


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120)
    return path


def plot_histogram(hist: Histogram, path: str | Path, result: fitmod.FitResult | None = None,
                   title: str = "", xlim: tuple[float, float] | None = None,
                   overlay: Sequence[tuple[Histogram, str]] = (), label: str = "data") -> Path:
    """Normalised coincidences vs delay (ns), optionally with the fitted model."""
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot(111)
    x = hist.centers / 1000.0
    ax.step(x, hist.normalized, where="mid", lw=0.7, color="tab:blue", label=label)
    colours = ["tab:gray", "tab:green", "tab:orange", "tab:purple"]
    for i, (other, name) in enumerate(overlay):
        ax.step(other.centers / 1000.0, other.normalized, where="mid", lw=0.7,
                color=colours[i % len(colours)], label=name)
    if result is not None:
        mdl = models.get_model(result.model_id)
        xf = np.linspace(x.min(), x.max(), max(2000, 4 * len(x)))
        yf = models.evaluate(result.model_id, xf, **result.params)
        if mdl.density:
            yf = yf * hist.bin_width / 1000.0
        ax.plot(xf, yf, color="tab:red", lw=1.2, label=f"fit ({result.model_id})")
    ax.set_xlabel("delay (ns)")
    ax.set_ylabel(f"coincidences ({hist.normalization})")
    if xlim:
        ax.set_xlim(*xlim)
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_fit_data(data: fitmod.FitData, result: fitmod.FitResult, path: str | Path,
                  xlabel: str = "x", title: str = "") -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    ax.errorbar(data.x, data.y, yerr=data.sigma, fmt=".", ms=3, lw=0.5, label="data")
    xf = np.linspace(data.x.min(), data.x.max(), 1000)
    ax.plot(xf, models.evaluate(result.model_id, xf, **result.params), color="tab:red", label="fit")
    ax.set_xlabel(xlabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_scan(points, path: str | Path, xlabel: str | None = None) -> Path:
    """Visibility and fitted v-factor against the scanned variable."""
    ok = [p for p in points if p.status == "ok" or p.status.startswith("fit")]
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    if ok:
        x = np.array([p.value for p in ok])
        ax.errorbar(x, [p.visibility for p in ok], yerr=[p.visibility_err for p in ok],
                    fmt="o", label="V (windowed areas)")
        ax.errorbar(x, [p.v_fit for p in ok], yerr=[p.v_err for p in ok], fmt="s", label="v (model fit)")
        ax.legend(fontsize=8)
    ax.set_xlabel(xlabel or (points[0].kind if points else ""))
    ax.set_ylabel("visibility")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    return _save(fig, path)
