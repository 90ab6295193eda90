"""Closed-form correlation models, coherence relations and the model registry.

Times in ns, jitter in ps, rates in 1/ns, linewidths in MHz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

GRID_STEP = 0.01  # ns


@dataclass(frozen=True)
class CwHbtModel:
    b: float
    tau_hbt: float


@dataclass(frozen=True)
class CwHomModel:
    r2: float
    t2: float
    delta_t: float
    V: float
    tau_par: float
    hbt: CwHbtModel


@dataclass(frozen=True)
class PulsedHomModel:
    tau1: float
    gamma_star: float
    v: float
    r2: float
    t2: float
    jitter_sigma: float = 0.0
    period: float = 40.3
    offset: float = 0.0
    cycles: int = 1

    @property
    def R(self) -> float:
        return self.r2 / (self.r2 + self.t2)

    @property
    def T(self) -> float:
        return self.t2 / (self.r2 + self.t2)

    @property
    def pair_sigma(self) -> float:
        """Std of the two-detector timing difference, ns."""
        return math.sqrt(2.0) * self.jitter_sigma / 1000.0


@dataclass(frozen=True)
class SpectralModel:
    nu0: float
    fwhm: float
    amplitude: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError("fwhm must be > 0")


# --------------------------------------------------------------- CW models

def g2_hbt_cw(tau, m: CwHbtModel):
    return 1.0 - m.b * np.exp(-np.abs(tau) / m.tau_hbt)


def g2_hom_cw(tau, m: CwHomModel):
    tau = np.asarray(tau, float)
    R, T = m.r2, m.t2
    g = lambda t: g2_hbt_cw(t, m.hbt)
    dip = 1.0 - m.V * np.exp(-np.abs(tau) / m.tau_par)
    return 2 * R * T * g(tau) + (T * T * g(tau - m.delta_t) + R * R * g(tau + m.delta_t)) * dip


# ------------------------------------------------------ derived quantities

def coherence_relations(tau_par: float | None = None, tau1: float | None = None,
                        gamma_star: float | None = None) -> dict[str, float]:
    """Coherence time and linewidths (MHz) from the HOM dip or from (tau1, gamma*)."""
    out: dict[str, float] = {}
    if tau_par is not None:
        if not tau_par > 0:
            raise ValueError("tau_par must be > 0")
        tau_c = 2.0 * tau_par
        out["tau_c"] = tau_c
        out["fwhm_from_tau_c"] = 1000.0 / (math.pi * tau_c)
    if tau1 is not None:
        if not tau1 > 0:
            raise ValueError("tau1 must be > 0")
        g = 0.0 if gamma_star is None else gamma_star
        if g < 0:
            raise ValueError("gamma_star must be >= 0")
        out["fwhm_lifetime"] = 1000.0 / (2.0 * math.pi * tau1)
        out["fwhm_total"] = out["fwhm_lifetime"] + 1000.0 * g / math.pi
    return out


def postselected_coherence(g2_perp_0: float | None = None, g2_par_0: float | None = None,
                           g2_hbt_0: float | None = None) -> float:
    """|g1(0)|^2 from the HOM dips, or 1 - 2 g2_HBT(0)."""
    if g2_hbt_0 is not None:
        return 1.0 - 2.0 * g2_hbt_0
    if g2_perp_0 is None or g2_par_0 is None:
        raise ValueError("need g2_perp_0 and g2_par_0, or g2_hbt_0")
    if g2_perp_0 == 0:
        raise ZeroDivisionError("g2_perp(0) = 0")
    return (g2_perp_0 - g2_par_0) / g2_perp_0


def pulsed_peak_area_ratio(k: int, R: float, T: float, cycles: int = 1) -> float:
    """A_k / N for the side peaks of a pulsed HOM histogram."""
    if R + T > 1 + 1e-12:
        raise ValueError("R + T must be <= 1")
    if k == 0:
        raise ValueError("k = 0 is the interference peak; use hom_pulsed_central_density")
    if k == -cycles:
        return 1.0 - R * R
    if k == cycles:
        return 1.0 - T * T
    return 1.0


def visibility_from_areas(a_perp: float, a_par: float) -> float:
    if not a_perp > 0:
        raise ValueError("a_perp must be > 0")
    return (a_perp - a_par) / a_perp


def ms_overlap(v: float, R: float, T: float, g2_zero: float) -> float:
    """Mean wave-packet overlap of the single-photon component."""
    den = 4.0 * R * T * (1.0 - g2_zero)
    if den == 0:
        raise ZeroDivisionError("4 R T (1 - g2(0)) = 0")
    return (v + 1.0) / den - 1.0


def zpl_visibility_cap(alpha: float) -> float:
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * alpha


def lorentzian(nu, m: SpectralModel):
    """``nu`` and ``nu0`` in GHz, ``fwhm`` in MHz."""
    half = m.fwhm / 2000.0
    nu = np.asarray(nu, float)
    return m.offset + m.amplitude * half**2 / ((nu - m.nu0) ** 2 + half**2)


def exp_decay(t, tau1: float, amp: float, offset: float = 0.0):
    t = np.asarray(t, float)
    return offset + np.where(t >= 0, amp * np.exp(-np.clip(t, 0, None) / tau1), 0.0)


# -------------------------------------------------------------- convolution

def convolve_gaussian(model_fn: Callable[[np.ndarray], np.ndarray] | np.ndarray,
                      sigma_ps: float, grid: np.ndarray) -> np.ndarray:
    """Discrete Gaussian convolution of a model sampled on a uniform ns grid.

    The kernel is normalised to unit sum so the integral is preserved for
    functions that vanish at the grid ends.
    """
    grid = np.asarray(grid, float)
    f = np.asarray(model_fn(grid) if callable(model_fn) else model_fn, float)
    if sigma_ps <= 0:
        return f.copy()
    s = sigma_ps / 1000.0
    h = grid[1] - grid[0]
    if h > s / 4 * (1 + 1e-9):
        raise ValueError(f"grid too coarse: spacing {h} ns > sigma/4 = {s / 4} ns")
    half = int(math.ceil(8 * s / h))
    x = h * np.arange(-half, half + 1)
    kern = np.exp(-0.5 * (x / s) ** 2)
    kern /= kern.sum()
    return fftconvolve(f, kern, mode="same")


def _on_grid(fn: Callable[[np.ndarray], np.ndarray], tau: np.ndarray, sigma_ns: float,
             step: float = GRID_STEP) -> np.ndarray:
    """Evaluate ``fn`` convolved with N(0, sigma_ns) at arbitrary ``tau``."""
    tau = np.asarray(tau, float)
    if sigma_ns <= 0:
        return fn(tau)
    step = min(step, sigma_ns / 4)
    pad = 10 * sigma_ns
    lo, hi = tau.min() - pad, tau.max() + pad
    n = int(math.ceil((hi - lo) / step)) + 1
    grid = lo + step * np.arange(n)
    conv = convolve_gaussian(fn, sigma_ns * 1000.0, grid)
    return np.interp(tau, grid, conv)


# ------------------------------------------------------------ pulsed model
#
# The coincidence histogram of a pulse train is a sum over photon pairs.
# Photons from pulses i and j (one photon per pulse) meet at the detectors
# with an excitation offset D; a pair in the same interferometer arm gives
# plain side-peak coincidences, a cross-arm pair with offset n*P + delta
# also interferes where both wave packets have started before either click.
# An emitter still excited at the next trigger skips that pulse; to first
# order in q = exp(-P/tau1) this truncates the earlier photon's delay of
# every adjacent-pulse pair at P and boosts the pair rate by 1 + q.


def _pair_density(tp: np.ndarray, D: float, tau1: float, lower_both: bool,
                  trunc: str, period: float) -> np.ndarray:
    """Density of tau' = t_b - t_a for photon a excited at 0 and b at ``D``.

    ``lower_both`` restricts to clicks after both excitations. ``trunc``:
    "none", "a" (a's delay < period) or "b" (b's delay < period).
    Unit area for ``trunc="none"`` and ``lower_both=False``.
    """
    lo = np.maximum(0.0, D - tp)
    if lower_both:
        lo = np.maximum(lo, np.maximum(D, -tp))
    if trunc == "a":
        hi = np.full_like(tp, period)
    elif trunc == "b":
        hi = period + D - tp
    else:
        hi = np.full_like(tp, np.inf)
    span = hi - lo
    ok = span > 0
    out = np.zeros_like(tp)
    expo = -(tp[ok] - D) / tau1 - 2.0 * lo[ok] / tau1
    out[ok] = np.exp(expo) * -np.expm1(-2.0 * span[ok] / tau1) / (2.0 * tau1)
    return out


@dataclass(frozen=True)
class _PairType:
    cross: bool      # cross-arm (can interfere) or same-arm
    n: int           # peak index of the pair's distinguishable coincidences
    D: float         # excitation offset (b minus a for cross-arm pairs)
    trunc: str
    factor: float


def _pair_types(m: PulsedHomModel, k_max: int, blocking: bool = True) -> list[_PairType]:
    P, c, d = m.period, m.cycles, m.offset
    q = math.exp(-P / m.tau1) if blocking else 0.0
    out = []
    for n in range(-k_max, k_max + 1):
        # same-arm pair: pulses n apart, the later one at +n*P
        if n > 0:
            adj = blocking and n == 1
            out.append(_PairType(False, n, n * P, "a" if adj else "none", 1 + q if adj else 1.0))
        # cross-arm pair: b from pulse j, a from pulse i with j - i = n - c; n = c is one photon
        if n != c:
            sep = n - c
            adj = blocking and abs(sep) == 1
            trunc = ("a" if sep > 0 else "b") if adj else "none"
            out.append(_PairType(True, n, n * P + d, trunc, 1 + q if adj else 1.0))
    return out


def _pair_contribution(t: np.ndarray, pt: _PairType, m: PulsedHomModel, v: float) -> np.ndarray:
    R, T = m.R, m.T
    f = lambda x, both: _pair_density(x, pt.D, m.tau1, both, pt.trunc, m.period)
    if not pt.cross:
        # earlier photon -> ch0 and later -> ch1 (or reverse): 2RT each side
        return pt.factor * 2 * R * T * (f(t, False) + f(-t, False))
    dist_p, dist_m = f(t, False), f(-t, False)
    both_p, both_m = f(t, True), f(-t, True)
    gd = np.exp(-2.0 * m.gamma_star * np.abs(t))
    # where both packets have started the two orderings are exchangeable
    val = (T * T * (dist_p - both_p) + R * R * (dist_m - both_m)
           + (0.5 * (T * T + R * R) - R * T * v * gd) * (both_p + both_m))
    return pt.factor * val


def _relevant(t: np.ndarray, pt: _PairType, m: PulsedHomModel) -> np.ndarray:
    """Mask of tau values where a pair type contributes above ~1e-16."""
    reach = 40.0 * m.tau1
    near = np.abs(np.abs(t) - abs(pt.D)) < reach
    if pt.cross:
        near |= np.abs(t) < reach
    return near


def _train_raw(m: PulsedHomModel, k_max: int, parts: str, v: float | None = None,
               blocking: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """Un-convolved density; ``parts`` is "all", "central" (the n=0 pair) or "sides"."""
    v = m.v if v is None else v
    types = _pair_types(m, k_max, blocking)
    if parts == "central":
        types = [p for p in types if p.cross and p.n == 0]
    elif parts == "sides":
        types = [p for p in types if not (p.cross and p.n == 0)]

    def raw(t):
        t = np.asarray(t, float)
        out = np.zeros_like(t)
        for pt in types:
            sel = _relevant(t, pt, m)
            if sel.any():
                out[sel] += _pair_contribution(t[sel], pt, m, v)
        return out

    return raw


def _auto_kmax(tau: np.ndarray, m: PulsedHomModel) -> int:
    span = float(np.max(np.abs(tau))) if np.size(tau) else 0.0
    return int((span + 40.0 * m.tau1) / m.period) + m.cycles + 2


def hom_pulsed_central_density(tau, m: PulsedHomModel, blocking: bool = True):
    """Unnormalised zero-delay peak of the cross-arm pair that interferes.

    With no offset and long periods this is
    (R^2+T^2) e^{-|t|/tau1} - 2RTv e^{-(1/tau1+2 gamma*)|t|}; an ``offset``
    moves the two distinguishable terms to +-offset and weakens the
    interference term by e^{-|offset|/tau1}. The result is convolved with the
    pair timing resolution sqrt(2) * jitter_sigma.
    """
    if not m.tau1 > 0:
        raise ValueError("tau1 must be > 0")
    if not 0 <= m.v <= 1:
        raise ValueError("v must lie in [0, 1]")
    tau = np.asarray(tau, float)
    raw = _train_raw(m, 0 if m.cycles else 1, "central", blocking=blocking)
    return 2.0 * m.tau1 * np.clip(_on_grid(raw, tau, m.pair_sigma), 0.0, None)


def hom_pulsed_train_density(tau, m: PulsedHomModel, include_central: bool = True,
                             include_sides: bool = True, k_max: int | None = None,
                             blocking: bool = True):
    """Coincidence density of the full pulse train, unit area per reference peak."""
    tau = np.asarray(tau, float)
    if k_max is None:
        k_max = _auto_kmax(tau, m)
    if include_central and include_sides:
        parts = "all"
    elif include_central:
        parts = "central"
    elif include_sides:
        parts = "sides"
    else:
        return np.zeros_like(tau)
    raw = _train_raw(m, k_max, parts, blocking=blocking)
    return np.clip(_on_grid(raw, tau, m.pair_sigma), 0.0, None)


def _integrate_window(fn, m: PulsedHomModel, window: float) -> float:
    s = m.pair_sigma
    half = window / 2
    step = min(0.002, s / 4) if s > 0 else 0.002
    n = int(math.ceil(window / step))
    n += n % 2
    t = np.linspace(-half, half, n + 1)
    y = _on_grid(fn, t, s, step)
    h = t[1] - t[0]
    return float(h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum()))


def window_areas(m: PulsedHomModel, window: float, blocking: bool = True) -> tuple[float, float]:
    """(A_perp, A_par) inside +-window/2 after removing neighbour-peak tails.

    Units of one reference-peak area. Interference from every cross-arm pair
    lands at zero delay and is kept in A_par.
    """
    k_max = _auto_kmax(np.array([window / 2]), m)
    perp_all = _integrate_window(_train_raw(m, k_max, "all", v=0.0, blocking=blocking), m, window)
    par_all = _integrate_window(_train_raw(m, k_max, "all", blocking=blocking), m, window)
    leak = _integrate_window(_train_raw(m, k_max, "sides", v=0.0, blocking=blocking), m, window)
    return perp_all - leak, par_all - leak


def visibility_vs_offset(delta: float, m: PulsedHomModel, window: float, blocking: bool = True) -> float:
    """Windowed-area visibility for wave packets offset by ``delta`` ns."""
    if window > m.period:
        raise ValueError("window larger than period")
    if abs(delta) >= m.period / 2:
        raise ValueError("|delta| must be < period/2")
    from dataclasses import replace
    a_perp, a_par = window_areas(replace(m, offset=delta), window, blocking)
    return visibility_from_areas(a_perp, a_par)


def side_peak_leak(m: PulsedHomModel, window: float, blocking: bool = True) -> float:
    """Area (in units of N) that neighbouring peaks put inside the central window without interference."""
    k_max = _auto_kmax(np.array([window / 2]), m)
    return _integrate_window(_train_raw(m, k_max, "sides", v=0.0, blocking=blocking), m, window)


def window_fraction(tau1: float, window: float) -> float:
    """Share of a two-sided exponential (decay tau1) inside +-window/2."""
    return 1.0 - math.exp(-window / 2 / tau1)


def visibility_report(tau1: float = 4.04, gamma_star: float = 0.055, v: float = 0.95,
                      rt_ratio: float = 1.10, jitter_sigma: float = 163.0,
                      window: float = 26.0, period: float = 1000.0 / 24.79,
                      reported: float = 0.78) -> dict[str, float]:
    """Windowed central-peak visibility predicted by the pulsed model.

    Also returns the value obtained if the two-photon interference term
    decayed at 1/tau1 + gamma* instead of 1/tau1 + 2 gamma*.
    """
    r2 = rt_ratio / (1 + rt_ratio)
    m = PulsedHomModel(tau1, gamma_star, v, r2, 1 - r2, jitter_sigma, period)
    R, T = m.R, m.T
    bs = 2 * R * T / (R * R + T * T)
    g1 = 1 / tau1
    return {
        "visibility_window": visibility_vs_offset(0.0, m, window),
        "visibility_infinite_window": v * bs * g1 / (g1 + 2 * gamma_star),
        "visibility_single_gamma": v * bs * g1 / (g1 + gamma_star),
        "reported": reported,
        "window_fraction": window_fraction(tau1, window),
    }


# ----------------------------------------------------------------- registry

@dataclass(frozen=True)
class ModelSpec:
    """Registry entry: ``fn(x, **params)``; density models are multiplied by bin width."""

    id: str
    fn: Callable[..., np.ndarray]
    params: tuple[str, ...]
    defaults: dict[str, float] = field(default_factory=dict)
    density: bool = False
    positive: frozenset = frozenset()
    fractions: frozenset = frozenset()


def _r2t2(rt_ratio):
    r2 = rt_ratio / (1.0 + rt_ratio)
    return r2, 1.0 - r2


def _hbt_cw(x, b, tau_hbt, jitter_sigma=0.0):
    m = CwHbtModel(b, tau_hbt)
    return _on_grid(lambda t: g2_hbt_cw(t, m), x, math.sqrt(2) * jitter_sigma / 1000.0)


def _hom_cw(x, delta_t, rt_ratio, visibility, tau_par, b, tau_hbt, jitter_sigma=0.0):
    r2, t2 = _r2t2(rt_ratio)
    m = CwHomModel(r2, t2, delta_t, visibility, tau_par, CwHbtModel(b, tau_hbt))
    return _on_grid(lambda t: g2_hom_cw(t, m), x, math.sqrt(2) * jitter_sigma / 1000.0)


def _hom_pulsed(x, tau1, gamma_star, v, rt_ratio, jitter_sigma, period, offset=0.0, cycles=1, scale=1.0):
    r2, t2 = _r2t2(rt_ratio)
    m = PulsedHomModel(tau1, gamma_star, v, r2, t2, jitter_sigma, period, offset, int(round(cycles)))
    return scale * hom_pulsed_train_density(x, m)


def _lorentzian(x, nu0, fwhm, amplitude, offset=0.0):
    return lorentzian(x, SpectralModel(nu0, fwhm, amplitude, offset))


def _exp_decay(x, amp, tau1, offset=0.0):
    return exp_decay(x, tau1, amp, offset)


MODELS: dict[str, ModelSpec] = {
    "hbt_cw": ModelSpec(
        "hbt_cw", _hbt_cw, ("b", "tau_hbt", "jitter_sigma"), {"jitter_sigma": 0.0},
        positive=frozenset({"tau_hbt"}), fractions=frozenset({"b"}),
    ),
    "hom_cw": ModelSpec(
        "hom_cw", _hom_cw,
        ("delta_t", "rt_ratio", "visibility", "tau_par", "b", "tau_hbt", "jitter_sigma"),
        {"jitter_sigma": 0.0},
        positive=frozenset({"delta_t", "rt_ratio", "tau_par", "tau_hbt"}),
        fractions=frozenset({"b", "visibility"}),
    ),
    "hom_pulsed": ModelSpec(
        "hom_pulsed", _hom_pulsed,
        ("tau1", "gamma_star", "v", "rt_ratio", "jitter_sigma", "period", "offset", "cycles", "scale"),
        {"offset": 0.0, "cycles": 1, "scale": 1.0},
        density=True,
        positive=frozenset({"tau1", "gamma_star", "rt_ratio", "period", "scale"}),
        fractions=frozenset({"v"}),
    ),
    "lorentzian": ModelSpec(
        "lorentzian", _lorentzian, ("nu0", "fwhm", "amplitude", "offset"), {"offset": 0.0},
        positive=frozenset({"fwhm", "amplitude"}),
    ),
    "exp_decay": ModelSpec(
        "exp_decay", _exp_decay, ("amp", "tau1", "offset"), {"offset": 0.0},
        positive=frozenset({"amp", "tau1"}),
    ),
}


def get_model(model_id: str) -> ModelSpec:
    try:
        return MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; known: {sorted(MODELS)}") from None


def evaluate(model_id: str, x, **params) -> np.ndarray:
    mdl = get_model(model_id)
    full = {**mdl.defaults, **params}
    missing = set(mdl.params) - set(full)
    if missing:
        raise ValueError(f"missing parameters for {model_id}: {sorted(missing)}")
    return mdl.fn(np.asarray(x, float), **{k: full[k] for k in mdl.params})
