"""End-to-end visibility scans over repetition rate, delay length and cycle separation.

Each grid point simulates the parallel and orthogonal configurations,
histograms them, measures peak areas and fits the pulsed model. Points
run in a process pool; each point's seeds depend only on the base seed and
the point index, so results do not depend on scheduling.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import correlate, fit, models, rng
from .params import ExperimentConfig
from .sim import run_experiment

KINDS = ("reprate", "delay_length", "cycle_separation")
BIN_PS = 100
N_REF_PEAKS = 3


@dataclass
class ScanPoint:
    kind: str
    value: float
    period: float
    delta_t: float
    offset: float
    cycles: int
    window: float
    visibility: float = math.nan
    visibility_err: float = math.nan
    v_fit: float = math.nan
    v_err: float = math.nan
    tau1_fit: float = math.nan
    gamma_star_fit: float = math.nan
    a_par: float = math.nan
    a_perp: float = math.nan
    n_ref: float = math.nan
    leak: float = math.nan
    status: str = "ok"


def point_config(kind: str, value: float, base: ExperimentConfig) -> tuple[ExperimentConfig, int]:
    """Configuration for one grid point and the number of cycles separating the photons."""
    if kind == "reprate":
        return base.with_params("pump", rep_rate=float(value)), 1
    if kind == "delay_length":
        cfg = base.with_params("interferometer", delta_t=float(value))
        return cfg.with_params("pump", rep_rate=1000.0 / float(value)), 1
    if kind == "cycle_separation":
        c = int(value)
        if c < 1 or c != value:
            raise ValueError("cycle separation must be a positive integer")
        return base.with_params("interferometer", delta_t=c * base.pump.period), c
    raise ValueError(f"unknown scan kind {kind!r}; expected one of {KINDS}")


def default_window(kind: str, grid: Sequence[float], base: ExperimentConfig) -> float:
    """Common analysis window: 26 ns, shrunk to the shortest period in the scan."""
    periods = [point_config(kind, g, base)[0].pump.period for g in grid]
    return min(26.0, min(periods))


def _histogram(cfg: ExperimentConfig, seed: int, cycles: int) -> correlate.Histogram:
    det = run_experiment(cfg, seed=seed)
    a, b = det.split()
    P = cfg.pump.period
    half = int(round((cycles + 2 + N_REF_PEAKS + 0.5) * P * 1000))
    return correlate.cross_histogram(a, b, correlate.HistogramConfig.centered(half, BIN_PS))


def analyse_point(kind: str, value: float, base: ExperimentConfig, seed: int, window: float,
                  pol_parallel: float | None = None) -> ScanPoint:
    cfg, c = point_config(kind, value, base)
    P = cfg.pump.period
    ifo = cfg.interferometer
    offset = ifo.delta_t - c * P
    pt = ScanPoint(kind, float(value), P, ifo.delta_t, offset, c, window)
    if abs(offset) >= P / 2:
        pt.status = "failed: delay mismatch exceeds half a period"
        return pt
    par_cfg = cfg if pol_parallel is None else cfg.with_params("interferometer", pol_angle=pol_parallel)
    perp_cfg = cfg.with_params("interferometer", pol_angle=math.pi / 2)
    h_par = _histogram(par_cfg, rng.derive_seed(seed, 0), c)
    h_perp = _histogram(perp_cfg, rng.derive_seed(seed, 1), c)

    refs = [k for k in range(-(c + 1 + N_REF_PEAKS), c + 2 + N_REF_PEAKS) if abs(k) >= c + 2]
    n_par = correlate.peak_areas(h_par, P, P, reference_ks=refs).n_ref
    n_perp = correlate.peak_areas(h_perp, P, P, reference_ks=refs).n_ref
    if not n_par or not n_perp:
        pt.status = "failed: no coincidences in reference peaks"
        return pt
    a_par = correlate.peak_areas(h_par, P, window, k_range=[0]).areas[0]
    a_perp = correlate.peak_areas(h_perp, P, window, k_range=[0]).areas[0]

    jitter = cfg.detectors[0].jitter_sigma
    rt = ifo.R / ifo.T
    h_norm = correlate.normalize(h_par, "peak_mean", period=P, reference_ks=refs)
    try:
        res = fit.fit_recipe("hom_pulsed", [h_norm],
                             {"rt_ratio": rt, "jitter_sigma": jitter, "period": P,
                              "offset": offset, "cycles": c},
                             fit_range=(-P / 2, P / 2))
        pt.v_fit, pt.v_err = res.params["v"], res.sigmas["v"]
        pt.tau1_fit, pt.gamma_star_fit = res.params["tau1"], res.params["gamma_star"]
        tau1 = res.params["tau1"]
        if not res.converged:
            pt.status = "fit not converged"
        elif "at bound" in res.message:
            pt.status = "fit" + res.message.split(";", 1)[1]
    except (fit.FitError, ValueError) as exc:
        pt.status = f"fit failed: {exc}"
        tau1 = cfg.emitter.tau1

    m = models.PulsedHomModel(tau1, 0.0, 1.0, ifo.R, ifo.T, jitter, P, offset, c)
    leak = models.side_peak_leak(m, window)
    # both polarisations carry the same neighbour-peak tails; remove them from the reference
    perp_corr = a_perp / n_perp - leak
    par_corr = a_par / n_par - leak
    pt.a_par, pt.a_perp, pt.n_ref, pt.leak = a_par / n_par, a_perp / n_perp, 0.5 * (n_par + n_perp), leak
    if perp_corr <= 0:
        pt.status = "failed: empty orthogonal central peak"
        return pt
    pt.visibility = 1.0 - par_corr / perp_corr
    rel_par = math.sqrt(max(a_par, 1.0)) / n_par
    rel_perp = math.sqrt(max(a_perp, 1.0)) / n_perp
    pt.visibility_err = (par_corr / perp_corr) * math.sqrt((rel_par / max(par_corr, 1e-12)) ** 2
                                                          + (rel_perp / perp_corr) ** 2)
    return pt


def _run_point(args) -> ScanPoint:
    kind, value, base, seed, window, pol = args
    try:
        return analyse_point(kind, value, base, seed, window, pol)
    except Exception as exc:  # keep the scan going; the row carries the reason
        cfg_period = math.nan
        try:
            cfg_period = point_config(kind, value, base)[0].pump.period
        except Exception:
            pass
        return ScanPoint(kind, float(value), cfg_period, math.nan, math.nan, 0, window,
                         status=f"failed: {type(exc).__name__}: {exc}")


def run_scan(kind: str, grid: Sequence[float], base: ExperimentConfig, seed: int | None = None,
             mode: str | None = None, workers: int | None = None, window: float | None = None) -> list[ScanPoint]:
    """Visibility and fitted v-factor for every grid point.

    ``base`` is the parallel-polarisation configuration; its ``pol_angle`` is
    kept for the parallel run and replaced by pi/2 for the orthogonal run.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scan kind {kind!r}; expected one of {KINDS}")
    grid = list(grid)
    if not grid:
        raise ValueError("scan grid is empty")
    if base.pump.mode != "pulsed":
        raise ValueError("scans need a pulsed base configuration")
    if mode is not None:
        base = base.replace(mode=mode)
    seed = base.seed if seed is None else seed
    if window is None:
        window = default_window(kind, grid, base)
    jobs = [(kind, g, base, rng.derive_seed(seed, i), window, None) for i, g in enumerate(grid)]
    workers = rng.worker_count() if workers is None else max(1, workers)
    if workers == 1 or len(jobs) == 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(_run_point, jobs))


FIELDS = [f for f in ScanPoint.__dataclass_fields__]


def write_scan_csv(path: str | Path, points: Sequence[ScanPoint]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in asdict(p).items()})
    return path


def read_scan_csv(path: str | Path) -> list[ScanPoint]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                ftype = ScanPoint.__dataclass_fields__[k].type
                if ftype in ("float", float):
                    kw[k] = float(v)
                elif ftype in ("int", int):
                    kw[k] = int(v)
                else:
                    kw[k] = v
            out.append(ScanPoint(**kw))
    return out


def weighted_flatness(points: Sequence[ScanPoint], attr: str = "v_fit", err: str = "v_err") -> tuple[float, int]:
    """chi^2 of the points about their weighted mean, and its degrees of freedom."""
    y = np.array([getattr(p, attr) for p in points if p.status == "ok"])
    s = np.array([getattr(p, err) for p in points if p.status == "ok"])
    if len(y) < 2:
        return 0.0, 0
    w = 1 / s**2
    mean = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (y - mean) ** 2)), len(y) - 1
