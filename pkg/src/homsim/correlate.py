"""Coincidence histograms and pulsed peak-area analysis.

All times are integer picoseconds. Bins are half-open on the side away
from tau = 0 ([lo, hi) for tau >= 0 and (lo, hi] for tau < 0), so a
zero-centred layout (tau_min = -tau_max, odd bin count) reflects exactly
under a channel swap.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import rng


class CorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class HistogramConfig:
    bin_width: int
    tau_min: int
    tau_max: int
    mode: str = "full"

    def __post_init__(self):
        if self.bin_width <= 0:
            raise CorrelationError("bin_width must be > 0")
        if not self.tau_min < self.tau_max:
            raise CorrelationError("tau_min must be < tau_max")
        if (self.tau_max - self.tau_min) % self.bin_width:
            raise CorrelationError("(tau_max - tau_min) must be a multiple of bin_width")
        if self.mode not in ("full", "start-stop"):
            raise CorrelationError("mode must be 'full' or 'start-stop'")

    @property
    def n_bins(self) -> int:
        return (self.tau_max - self.tau_min) // self.bin_width

    @property
    def edges(self) -> np.ndarray:
        return self.tau_min + self.bin_width * np.arange(self.n_bins + 1, dtype=np.int64)

    @classmethod
    def centered(cls, half_range: int, bin_width: int, mode: str = "full") -> "HistogramConfig":
        """Zero-centred layout with an odd number of bins (central bin straddles 0)."""
        n_half = int(np.ceil((half_range - bin_width / 2) / bin_width))
        if bin_width % 2:
            raise CorrelationError("centred layouts need an even bin_width")
        hi = bin_width // 2 + n_half * bin_width
        return cls(bin_width, -hi, hi, mode)


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalized: np.ndarray | None = None
    normalization: str = "none"
    divisor: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges)
        self.counts = np.asarray(self.counts)
        if len(self.bin_edges) != len(self.counts) + 1:
            raise CorrelationError("len(bin_edges) must be len(counts) + 1")
        if np.any(self.counts < 0):
            raise CorrelationError("counts must be non-negative")
        if self.normalized is None:
            self.normalized = self.counts / self.divisor

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def sigma(self) -> np.ndarray:
        """Poisson error of ``normalized`` (raw-count floor of 1)."""
        return np.sqrt(np.maximum(self.counts, 1.0)) / self.divisor

    def __add__(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise CorrelationError("cannot add histograms with different binning")
        meta = dict(self.metadata)
        for key in ("pairs", "events_a", "events_b"):
            if key in self.metadata and key in other.metadata:
                meta[key] = self.metadata[key] + other.metadata[key]
        return Histogram(self.bin_edges, self.counts + other.counts, metadata=meta)


@dataclass(frozen=True)
class PeakAreas:
    areas: dict[int, float]
    period: float
    window: float
    n_ref: float | None
    reference_ks: tuple[int, ...] = ()

    def ratio(self, k: int) -> float:
        if not self.n_ref:
            raise CorrelationError("no reference peaks available")
        return self.areas[k] / self.n_ref


# ------------------------------------------------------------- histogramming

def bin_index(tau: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    """Bin of each integer delay (-1 when outside the histogram)."""
    tau = np.asarray(tau, np.int64)
    off = tau - cfg.tau_min
    pos = off // cfg.bin_width
    neg = -((-off) // cfg.bin_width) - 1  # ceil(off / w) - 1
    idx = np.where(tau >= 0, pos, neg)
    return np.where((idx >= 0) & (idx < cfg.n_bins), idx, -1)


def _check_sorted(x: np.ndarray, name: str) -> None:
    if len(x) > 1 and np.any(np.diff(x) < 0):
        raise CorrelationError(f"{name} is not sorted by timestamp")


def _full_chunk(a: np.ndarray, b: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    counts = np.zeros(cfg.n_bins, np.int64)
    if len(a) == 0 or len(b) == 0:
        return counts
    lo = np.searchsorted(b, a + cfg.tau_min, side="left")
    hi = np.searchsorted(b, a + cfg.tau_max, side="right")
    # sliding window: walk the j-th partner of every start in lockstep
    n_in = hi - lo
    active = np.flatnonzero(n_in > 0)
    j = 0
    while len(active):
        tau = b[lo[active] + j] - a[active]
        idx = bin_index(tau, cfg)
        counts += np.bincount(idx[idx >= 0], minlength=cfg.n_bins)
        j += 1
        active = active[n_in[active] > j]
    return counts


def _start_stop_chunk(a: np.ndarray, b: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    counts = np.zeros(cfg.n_bins, np.int64)
    if len(a) == 0 or len(b) == 0:
        return counts
    # first partner at or after the window start
    lo = np.searchsorted(b, a + cfg.tau_min, side="left")
    ok = lo < len(b)
    tau = b[lo[ok]] - a[ok]
    idx = bin_index(tau, cfg)
    counts += np.bincount(idx[idx >= 0], minlength=cfg.n_bins)
    return counts


def cross_histogram(
    stream_a: np.ndarray,
    stream_b: np.ndarray,
    cfg: HistogramConfig,
    chunks: int = 1,
    workers: int | None = None,
    channels: tuple[int, int] = (0, 1),
) -> Histogram:
    """Histogram of ``t_b - t_a`` over all pairs (full) or first partners (start-stop).

    Starts are split into ``chunks`` contiguous pieces histogrammed
    independently and summed; partners are searched in the whole of
    ``stream_b`` so pairs straddling a chunk boundary are never lost.
    """
    if channels[0] == channels[1] or stream_a is stream_b:
        raise CorrelationError("stream_a and stream_b are the same channel")
    a = np.asarray(stream_a, np.int64)
    b = np.asarray(stream_b, np.int64)
    _check_sorted(a, "stream_a")
    _check_sorted(b, "stream_b")
    fn = _full_chunk if cfg.mode == "full" else _start_stop_chunk
    chunks = max(1, int(chunks))
    pieces = np.array_split(a, chunks) if len(a) else [a]
    workers = rng.worker_count() if workers is None else workers
    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda p: fn(p, b, cfg), pieces))
    else:
        parts = [fn(p, b, cfg) for p in pieces]
    counts = np.sum(parts, axis=0)
    span = 0
    if len(a) or len(b):
        both = [x for x in (a, b) if len(x)]
        span = int(max(x[-1] for x in both) - min(x[0] for x in both))
    meta = {
        "mode": cfg.mode,
        "events_a": int(len(a)),
        "events_b": int(len(b)),
        "span_ps": span,
        "pairs": int(counts.sum()),
    }
    return Histogram(cfg.edges, counts, metadata=meta)


def brute_force_histogram(stream_a: np.ndarray, stream_b: np.ndarray, cfg: HistogramConfig) -> Histogram:
    """All-pairs O(n*m) reference (full mode only)."""
    a = np.asarray(stream_a, np.int64)
    b = np.asarray(stream_b, np.int64)
    tau = np.subtract.outer(b, a).ravel()
    idx = bin_index(tau, cfg)
    counts = np.bincount(idx[idx >= 0], minlength=cfg.n_bins)
    return Histogram(cfg.edges, counts)


def lifetime_histogram(stamps: np.ndarray, period_ps: float, bin_width: int, t_max: int | None = None) -> Histogram:
    """Histogram of arrival times relative to the preceding laser trigger."""
    stamps = np.asarray(stamps, np.int64)
    t_max = int(period_ps) if t_max is None else t_max
    n_bins = t_max // bin_width
    phase = np.mod(stamps.astype(float), period_ps)
    edges = bin_width * np.arange(n_bins + 1, dtype=np.int64)
    counts, _ = np.histogram(phase, bins=edges)
    return Histogram(edges, counts, metadata={"events": int(len(stamps)), "period_ps": period_ps})


# -------------------------------------------------------------- peak areas

def _window_sum(hist: Histogram, center: float, window: float) -> float:
    """Counts inside ``center +- window/2`` with fractional edge bins."""
    lo, hi = center - window / 2, center + window / 2
    e = hist.bin_edges.astype(float)
    overlap = np.clip(np.minimum(e[1:], hi) - np.maximum(e[:-1], lo), 0.0, None)
    return float(np.sum(hist.counts * overlap / np.diff(e)))


def _covered(hist: Histogram, center: float, window: float) -> bool:
    return center - window / 2 >= hist.bin_edges[0] - 1e-9 and center + window / 2 <= hist.bin_edges[-1] + 1e-9


def peak_areas(
    hist: Histogram,
    period: float,
    window: float,
    k_range: Iterable[int] | None = None,
    reference_ks: Iterable[int] | None = None,
) -> PeakAreas:
    """Raw area of each peak ``k`` inside ``k*period +- window/2`` (ns arguments).

    ``n_ref`` is the mean over the reference peaks (default: every ``|k| >= 2``
    in range whose window lies fully inside the histogram).
    """
    if not period > 0:
        raise CorrelationError("period must be > 0")
    if window > period:
        raise CorrelationError("window larger than period: peaks overlap")
    p_ps, w_ps = period * 1000.0, window * 1000.0
    if k_range is None:
        kmax = int(np.floor((max(-hist.bin_edges[0], hist.bin_edges[-1]) - w_ps / 2) / p_ps))
        k_range = range(-kmax, kmax + 1)
    ks = [k for k in k_range if _covered(hist, k * p_ps, w_ps)]
    areas = {k: _window_sum(hist, k * p_ps, w_ps) for k in ks}
    if reference_ks is None:
        refs = tuple(k for k in ks if abs(k) >= 2)
    else:
        refs = tuple(k for k in reference_ks if k in areas)
    n_ref = float(np.mean([areas[k] for k in refs])) if refs else None
    if n_ref is not None and n_ref <= 0:
        n_ref = None
    return PeakAreas(areas, period, window, n_ref, refs)


def pulsed_g2_zero(pa: PeakAreas) -> float:
    """A_0 / N."""
    if pa.n_ref is None:
        raise CorrelationError("no reference peak area (n_ref) available")
    return pa.areas[0] / pa.n_ref


# ------------------------------------------------------------ normalisation

def normalize(
    hist: Histogram,
    method: str = "plateau",
    *,
    plateau: Sequence[tuple[float, float]] | tuple[float, float] | None = None,
    period: float | None = None,
    window: float | None = None,
    excluded_ks: Iterable[int] = (0, -1, 1),
    reference_ks: Iterable[int] | None = None,
) -> Histogram:
    """Divide counts by a reference level.

    ``plateau``: mean count per bin over the given tau range(s) in ns.
    ``peak_mean``: mean peak *area* over reference peaks (canonical for
    visibilities; ``window`` defaults to the full period).
    ``peak_amplitude``: mean of the maximum bin of each reference peak.
    """
    if method == "none":
        return replace(hist, normalized=hist.counts.astype(float), normalization="none", divisor=1.0)
    if method == "plateau":
        if plateau is None:
            raise CorrelationError("plateau normalisation needs a tau range")
        ranges = [plateau] if np.ndim(plateau[0]) == 0 else list(plateau)
        c = hist.centers
        sel = np.zeros(len(c), bool)
        for lo, hi in ranges:
            sel |= (c >= lo * 1000.0) & (c <= hi * 1000.0)
        if not sel.any():
            raise CorrelationError("empty normalisation region")
        div = float(hist.counts[sel].mean())
        info = {"plateau_ns": [list(map(float, r)) for r in ranges]}
    elif method in ("peak_mean", "peak_amplitude"):
        if period is None:
            raise CorrelationError("peak normalisation needs a period")
        window = period if window is None else window
        excluded = set(excluded_ks)
        pa = peak_areas(hist, period, window)
        refs = [k for k in pa.areas if k not in excluded] if reference_ks is None else [
            k for k in reference_ks if k in pa.areas]
        if not refs:
            raise CorrelationError("empty normalisation region: no reference peaks in range")
        if method == "peak_mean":
            div = float(np.mean([pa.areas[k] for k in refs]))
        else:
            amps = []
            for k in refs:
                c = hist.centers
                sel = np.abs(c - k * period * 1000.0) <= window * 500.0
                amps.append(hist.counts[sel].max())
            div = float(np.mean(amps))
        info = {"period_ns": period, "window_ns": window, "reference_ks": sorted(refs)}
    else:
        raise CorrelationError(f"unknown normalisation {method!r}")
    if div <= 0:
        raise CorrelationError("normalisation divisor is zero")
    meta = dict(hist.metadata)
    meta["normalization"] = {"method": method, "divisor": div, **info}
    return Histogram(hist.bin_edges, hist.counts, hist.counts / div, method, div, meta)
