import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from homsim import models as M

R2, T2 = 0.5238, 0.4762


def _m(**kw):
    base = dict(tau1=4.04, gamma_star=0.055, v=0.95, r2=R2, t2=T2, jitter_sigma=0.0, period=1000.0)
    base.update(kw)
    return M.PulsedHomModel(**base)


# ------------------------------------------------------------------ arithmetic

def test_coherence_relations():
    c = M.coherence_relations(tau_par=2.7)
    assert c["tau_c"] == pytest.approx(5.4)
    assert c["fwhm_from_tau_c"] == pytest.approx(1000 / (math.pi * 5.4))
    d = M.coherence_relations(tau1=4.04, gamma_star=0.055)
    assert d["fwhm_lifetime"] == pytest.approx(1000 / (2 * math.pi * 4.04))
    assert d["fwhm_total"] - d["fwhm_lifetime"] == pytest.approx(55 / math.pi)
    for kw in ({"tau_par": 0}, {"tau1": -1}, {"tau1": 1, "gamma_star": -1}):
        with pytest.raises(ValueError):
            M.coherence_relations(**kw)


def test_postselected_coherence_and_overlap():
    assert M.postselected_coherence(g2_perp_0=0.5, g2_par_0=0.1) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        M.postselected_coherence(g2_par_0=0.1)
    with pytest.raises(ZeroDivisionError):
        M.postselected_coherence(g2_perp_0=0.0, g2_par_0=0.0)
    # a balanced, pure source with v = 1 has unit overlap
    assert M.ms_overlap(1.0, 0.5, 0.5, 0.0) == pytest.approx(1.0)
    with pytest.raises(ZeroDivisionError):
        M.ms_overlap(1.0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        M.zpl_visibility_cap(1.5)


def test_peak_area_law():
    R, T = 0.6, 0.4
    assert M.pulsed_peak_area_ratio(-1, R, T) == pytest.approx(1 - R * R)
    assert M.pulsed_peak_area_ratio(1, R, T) == pytest.approx(1 - T * T)
    assert M.pulsed_peak_area_ratio(3, R, T) == 1.0
    assert M.pulsed_peak_area_ratio(2, R, T, cycles=2) == pytest.approx(1 - T * T)
    with pytest.raises(ValueError):
        M.pulsed_peak_area_ratio(0, R, T)
    with pytest.raises(ValueError):
        M.pulsed_peak_area_ratio(1, 0.8, 0.8)


def test_visibility_from_areas():
    assert M.visibility_from_areas(1.0, 0.25) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        M.visibility_from_areas(0.0, 0.1)


def test_window_fraction():
    assert M.window_fraction(4.0, 26.0) == pytest.approx(1 - math.exp(-13 / 4))


def test_lorentzian_half_width():
    m = M.SpectralModel(nu0=0.1, fwhm=50.0, amplitude=2.0, offset=1.0)
    assert M.lorentzian(0.1, m) == pytest.approx(3.0)
    assert M.lorentzian(0.1 + 0.025, m) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        M.SpectralModel(0, 0)


def test_exp_decay_is_causal():
    y = M.exp_decay(np.array([-1.0, 0.0, 4.0]), 4.0, 10.0, 1.0)
    assert y.tolist() == pytest.approx([1.0, 11.0, 1 + 10 / math.e])


# ------------------------------------------------------------------ CW models

def test_hbt_and_hom_cw_limits():
    hbt = M.CwHbtModel(1.0, 3.0)
    assert M.g2_hbt_cw(0.0, hbt) == 0.0
    assert M.g2_hbt_cw(1e3, hbt) == pytest.approx(1.0)
    hom = M.CwHomModel(0.5, 0.5, 40.0, 1.0, 2.0, hbt)
    assert M.g2_hom_cw(0.0, hom) == pytest.approx(0.0, abs=1e-12)
    assert M.g2_hom_cw(500.0, hom) == pytest.approx(1.0)
    # orthogonal: central dip depth 2RT only from the HBT part -> R^2 + T^2 remains
    ortho = replace(hom, V=0.0)
    assert M.g2_hom_cw(0.0, ortho) == pytest.approx(0.5, abs=1e-6)


# ------------------------------------------------------------------ convolution

def test_convolution_matches_exgaussian():
    tau, sigma_ps = 4.0, 300.0
    s = sigma_ps / 1000
    dens = lambda t: np.where(t >= 0, np.exp(-np.clip(t, 0, None) / tau) / tau, 0.0)
    errs = []
    for h in (0.01, 0.002):
        grid = np.arange(-20, 80, h)
        conv = M.convolve_gaussian(dens, sigma_ps, grid)
        oracle = stats.exponnorm.pdf(grid, tau / s, loc=0, scale=s)
        errs.append(np.max(np.abs(conv - oracle)) / oracle.max())
        assert conv.sum() == pytest.approx(dens(grid).sum(), rel=1e-9)  # unit-sum kernel
    # sampling the step at t=0 costs O(h / sigma); it shrinks with the grid
    assert errs[0] < 1e-2 and errs[1] < errs[0] / 3
    pts = np.array([0.0, 1.0, 5.0])
    via_grid = M._on_grid(dens, pts, s)
    oracle = stats.exponnorm.pdf(pts, tau / s, scale=s)
    assert via_grid[1:] == pytest.approx(oracle[1:], rel=5e-3)
    assert via_grid[0] == pytest.approx(oracle[0], rel=0.02)  # at the step itself


def test_convolution_zero_sigma_and_coarse_grid():
    grid = np.linspace(0, 1, 11)
    assert np.array_equal(M.convolve_gaussian(np.ones(11), 0.0, grid), np.ones(11))
    with pytest.raises(ValueError):
        M.convolve_gaussian(np.ones(11), 100.0, grid)


# ------------------------------------------------------------------ pulsed model

def test_central_density_closed_form():
    m = _m()
    t = np.linspace(-30, 30, 601)
    g1, g = 1 / m.tau1, m.gamma_star
    oracle = ((m.R**2 + m.T**2) * np.exp(-g1 * np.abs(t))
              - 2 * m.R * m.T * m.v * np.exp(-(g1 + 2 * g) * np.abs(t)))
    got = M.hom_pulsed_central_density(t, m, blocking=False)
    assert np.allclose(got, oracle, atol=1e-12)
    # blocking only matters through exp(-P/tau1): invisible at a 1 us period
    assert np.allclose(M.hom_pulsed_central_density(t, m), oracle, atol=1e-12)


def test_central_density_offset_weakens_interference():
    d = 1.0
    m = _m(offset=d, gamma_star=0.0, v=1.0, r2=0.5, t2=0.5)
    # interference term at tau=0 scales with exp(-|d|/tau1); distinguishable terms sit at +-d
    got = M.hom_pulsed_central_density(np.array([0.0, d, -d]), m, blocking=False)
    # simultaneous clicks come only from overlapping packets, which fully coalesce
    assert got[0] == pytest.approx(0.0, abs=1e-12)
    assert got[1] > 0 and got[2] > 0


def test_central_density_validation():
    with pytest.raises(ValueError):
        M.hom_pulsed_central_density([0.0], _m(v=1.2))
    with pytest.raises(ValueError):
        M.hom_pulsed_central_density([0.0], _m(tau1=0.0))


def test_train_density_peak_areas_follow_area_law():
    m = _m(period=40.3, jitter_sigma=163.0, v=0.0)
    for k, expected in ((-1, 1 - m.R**2), (1, 1 - m.T**2), (2, 1.0), (-3, 1.0), (0, m.R**2 + m.T**2)):
        t = np.linspace(k * m.period - m.period / 2, k * m.period + m.period / 2, 8001)
        area = np.trapezoid(M.hom_pulsed_train_density(t, m, k_max=12), t)
        # blocking removes a fraction q of pulses from adjacent pairs
        q = math.exp(-m.period / m.tau1)
        assert area == pytest.approx(expected, abs=5 * q + 2e-3), k


def test_train_density_partition():
    m = _m(period=20.0, jitter_sigma=100.0)
    t = np.linspace(-50, 50, 1001)
    full = M.hom_pulsed_train_density(t, m)
    parts = (M.hom_pulsed_train_density(t, m, include_sides=False)
             + M.hom_pulsed_train_density(t, m, include_central=False))
    assert np.allclose(full, parts, atol=1e-9)
    assert not M.hom_pulsed_train_density(t, m, False, False).any()


def test_infinite_window_visibility_oracle():
    m = _m()
    rep = M.visibility_report(4.04, 0.055, 0.95, R2 / T2, 0.0, 200.0, 1000.0)
    assert rep["visibility_window"] == pytest.approx(rep["visibility_infinite_window"], abs=1e-6)
    bs = 2 * m.R * m.T / (m.R**2 + m.T**2)
    assert rep["visibility_infinite_window"] == pytest.approx(0.95 * bs / (1 + 2 * 0.055 * 4.04))


def test_windowed_visibility_reference_values():
    rep = M.visibility_report()
    assert rep["visibility_window"] == pytest.approx(0.6756, abs=5e-4)
    assert rep["visibility_single_gamma"] == pytest.approx(0.7738, abs=5e-4)
    assert rep["window_fraction"] == pytest.approx(1 - math.exp(-13 / 4.04))


def test_visibility_peaks_at_zero_offset():
    m = _m(period=40.3, jitter_sigma=163.0)
    v = [M.visibility_vs_offset(d, m, 26.0) for d in (-0.5, -0.2, 0.0, 0.2, 0.5)]
    assert v[2] == max(v)
    assert v[1] < v[2] and v[3] < v[2] and v[0] < v[1] and v[4] < v[3]
    with pytest.raises(ValueError):
        M.visibility_vs_offset(0.0, m, 50.0)
    with pytest.raises(ValueError):
        M.visibility_vs_offset(30.0, m, 26.0)


def test_blocking_free_limit_reduces_to_independent_pairs():
    m = _m(period=15.0, jitter_sigma=0.0)
    perp_b, par_b = M.window_areas(m, 15.0, blocking=True)
    perp_f, par_f = M.window_areas(m, 15.0, blocking=False)
    # central peak of the orthogonal case without blocking: R^2+T^2 inside +-P/2,
    # plus interference-free cross-pulse pairs that land in the window
    central = (m.R**2 + m.T**2) * (1 - math.exp(-7.5 / m.tau1))
    assert perp_f >= central - 1e-6
    assert abs(perp_b - perp_f) > 1e-3  # blocking matters at P ~ 4 tau1
    long = _m(period=400.0)
    assert M.window_areas(long, 26.0, True) == pytest.approx(M.window_areas(long, 26.0, False), abs=1e-12)


def test_side_peak_leak_vanishes_for_long_periods():
    assert M.side_peak_leak(_m(period=400.0), 26.0) < 1e-12
    assert M.side_peak_leak(_m(period=40.3, jitter_sigma=163.0), 26.0) > 1e-4


@settings(max_examples=15, deadline=None)
@given(st.floats(1.0, 8.0), st.floats(0.0, 0.5), st.floats(0.0, 1.0))
def test_central_density_nonnegative(tau1, gamma, v):
    m = _m(tau1=tau1, gamma_star=gamma, v=v, jitter_sigma=100.0, period=60.0)
    assert np.all(M.hom_pulsed_central_density(np.linspace(-20, 20, 201), m) >= 0)


def test_pair_density_integrates_to_one():
    f = lambda t: M._pair_density(np.atleast_1d(t), 3.0, 4.0, False, "none", 40.0)[0]
    total, _ = integrate.quad(f, -200, 200, points=[3.0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


# ------------------------------------------------------------------ registry

def test_registry():
    assert set(M.MODELS) == {"hbt_cw", "hom_cw", "hom_pulsed", "lorentzian", "exp_decay"}
    with pytest.raises(KeyError):
        M.get_model("nope")
    with pytest.raises(ValueError):
        M.evaluate("hbt_cw", [0.0], b=0.5)
    y = M.evaluate("hbt_cw", [0.0, 100.0], b=0.9, tau_hbt=3.0)
    assert y == pytest.approx([0.1, 1.0])
    y = M.evaluate("hom_pulsed", [0.0], tau1=4.0, gamma_star=0.0, v=1.0, rt_ratio=1.0,
                   jitter_sigma=0.0, period=1000.0)
    assert y[0] == pytest.approx(0.0, abs=1e-12)
