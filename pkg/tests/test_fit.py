import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homsim import correlate as C
from homsim import fit as F
from homsim import models as M


def _data(model_id, x, sigma=None, noise=0.0, seed=0, **params):
    y = M.evaluate(model_id, x, **params)
    s = np.full(len(x), 1.0) if sigma is None else np.asarray(sigma, float)
    y = y + noise * s * np.random.default_rng(seed).standard_normal(len(x))
    return F.FitData(np.asarray(x, float), y, s)


# ------------------------------------------------------------ core solver

def test_noiseless_round_trip():
    x = np.linspace(-0.3, 0.3, 121)
    d = _data("lorentzian", x, nu0=0.01, fwhm=55.0, amplitude=2000.0, offset=20.0)
    r = F.fit(F.FitProblem("lorentzian", d, {"nu0": (0.0, None, None), "fwhm": (40.0, 1.0, 500.0),
                                             "amplitude": (1500.0, None, None), "offset": (10.0, None, None)}))
    assert r.converged
    for k, v in (("nu0", 0.01), ("fwhm", 55.0), ("amplitude", 2000.0), ("offset", 20.0)):
        assert r.params[k] == pytest.approx(v, rel=1e-6, abs=1e-9)
    assert r.chi2_reduced < 1e-10


def test_linear_subproblem_matches_weighted_least_squares():
    # exp_decay with tau1 fixed is linear in (amp, offset): compare with lstsq
    g = np.random.default_rng(3)
    x = np.linspace(0, 20, 80)
    sig = 0.5 + g.random(80)
    y = 7.0 * np.exp(-x / 4.0) + 1.5 + sig * g.standard_normal(80)
    d = F.FitData(x, y, sig)
    r = F.fit(F.FitProblem("exp_decay", d, {"amp": (1.0, None, None), "offset": (0.0, None, None)},
                           {"tau1": 4.0}))
    A = np.column_stack([np.exp(-x / 4.0), np.ones_like(x)]) / sig[:, None]
    coef, res, *_ = np.linalg.lstsq(A, y / sig, rcond=None)
    chi2_red = float(res[0]) / (80 - 2)
    cov = np.linalg.inv(A.T @ A) * chi2_red
    assert [r.params["amp"], r.params["offset"]] == pytest.approx(coef, rel=1e-6)
    assert r.covariance == pytest.approx(cov, rel=1e-4)
    assert r.chi2_reduced == pytest.approx(chi2_red, rel=1e-8)


def test_uncertainty_coverage():
    x = np.linspace(-0.3, 0.3, 61)
    pulls = []
    for seed in range(150):
        d = _data("lorentzian", x, sigma=np.full(61, 30.0), noise=1.0, seed=seed,
                  nu0=0.0, fwhm=60.0, amplitude=1000.0, offset=50.0)
        r = F.fit(F.FitProblem("lorentzian", d, {"nu0": (0.005, None, None), "fwhm": (50.0, 1.0, 500.0),
                                                 "amplitude": (900.0, None, None), "offset": (40.0, None, None)}))
        pulls.append((r.params["fwhm"] - 60.0) / r.sigmas["fwhm"])
    inside = np.mean(np.abs(pulls) < 1)
    assert 0.58 < inside < 0.78
    assert abs(np.mean(pulls)) < 0.3


def test_jacobians_agree_with_analytic():
    x = np.linspace(0, 20, 50)
    fun = lambda u: M.exp_decay(x, u[1], u[0], 0.0)
    u = np.array([3.0, 4.0])
    analytic = np.column_stack([np.exp(-x / 4.0), 3.0 * x / 16.0 * np.exp(-x / 4.0)])
    assert F.numerical_jacobian(fun, u) == pytest.approx(analytic, abs=1e-7)
    assert F.richardson_jacobian(fun, u) == pytest.approx(analytic, abs=1e-9)


def test_fit_never_increases_cost():
    x = np.linspace(0.5, 30, 60)
    d = _data("exp_decay", x, sigma=np.full(60, 0.2), noise=1.0, seed=1, amp=10.0, tau1=4.0)
    prob = F.FitProblem("exp_decay", d, {"amp": (3.0, None, None), "tau1": (10.0, 0.1, 100.0)})
    obj = F._Objective(prob)
    u0 = np.array([t.to_u(x0) for t, (x0, _, _) in zip(obj.tf, prob.free_params.values())])
    start = float(obj.residuals(u0) @ obj.residuals(u0)) / (60 - 2)
    for it in (1, 2, 5, 50):
        r = F._fit_once(prob, it)
        assert r.chi2_reduced <= start + 1e-12
        start = r.chi2_reduced


@settings(max_examples=80, deadline=None)
@given(st.floats(-50, 50), st.sampled_from([(None, None, False), (0.0, None, True), (-60.0, 60.0, False),
                                             (None, 70.0, False)]))
def test_transform_round_trip(x, case):
    lo, hi, pos = case
    if pos and x <= 0:
        x = abs(x) + 1e-3
    t = F._Transform(lo, hi, pos)
    assert t.to_x(t.to_u(x)) == pytest.approx(x, rel=1e-9, abs=1e-9)
    u = t.to_u(x)
    h = 1e-6 * max(1.0, abs(u))
    assert t.dx_du(u) == pytest.approx((t.to_x(u + h) - t.to_x(u - h)) / (2 * h), rel=1e-4, abs=1e-9)


def test_parameter_pinned_at_bound():
    x = np.linspace(-0.3, 0.3, 121)
    d = _data("lorentzian", x, nu0=0.0, fwhm=55.0, amplitude=100.0, offset=-5.0)
    r = F.fit(F.FitProblem("lorentzian", d, {"nu0": (0.0, None, None), "fwhm": (40.0, 1.0, 500.0),
                                             "amplitude": (90.0, None, None), "offset": (2.0, 0.0, 10.0)}))
    assert r.params["offset"] == pytest.approx(0.0, abs=1e-6)
    assert "at bound" in r.message and "offset" in r.message
    assert r.sigmas["offset"] == 0.0


def test_unidentifiable_parameter_raises():
    x = np.linspace(-30, 30, 61)
    d = _data("hbt_cw", x, b=0.9, tau_hbt=3.0)
    # visibility never reaches the model when every dataset overrides it
    d2 = _data("hom_cw", x, delta_t=20.0, rt_ratio=1.0, visibility=0.0, tau_par=2.0, b=0.9, tau_hbt=3.0)
    prob = F.FitProblem("hom_cw", [d2], {"visibility": (0.5, 0.0, 1.0), "tau_par": (2.0, 0.1, 10.0)},
                        {"delta_t": 20.0, "rt_ratio": 1.0, "b": 0.9, "tau_hbt": 3.0},
                        dataset_overrides=[{"visibility": 0.0}])
    with pytest.raises(F.FitError, match="visibility="):
        F.fit(prob)
    assert len(d) == 61


@pytest.mark.parametrize("free, fixed, msg", [
    ({"b": (0.5, 0, 1)}, {"b": 0.5, "tau_hbt": 1.0}, "both free and fixed"),
    ({"b": (0.5, 0, 1)}, {}, "neither free nor fixed"),
    ({"b": (0.5, 0, 1), "tau_hbt": (1, 0, 5), "zzz": (1, 0, 2)}, {}, "unknown"),
    ({"b": (2.0, 0, 1), "tau_hbt": (1, 0, 5)}, {}, "outside its bounds"),
])
def test_validation(free, fixed, msg):
    d = _data("hbt_cw", np.linspace(-5, 5, 40), b=0.5, tau_hbt=1.0)
    with pytest.raises(ValueError, match=msg):
        F.fit(F.FitProblem("hbt_cw", d, free, fixed))


def test_validation_needs_enough_points_and_weighting():
    d = _data("hbt_cw", np.linspace(-5, 5, 3), b=0.5, tau_hbt=1.0)
    with pytest.raises(ValueError, match="twice as many"):
        F.fit(F.FitProblem("hbt_cw", d, {"b": (0.5, 0, 1), "tau_hbt": (1, 0.1, 5)}))
    d = _data("hbt_cw", np.linspace(-5, 5, 30), b=0.5, tau_hbt=1.0)
    with pytest.raises(ValueError, match="weighting"):
        F.fit(F.FitProblem("hbt_cw", d, {"b": (0.5, 0, 1), "tau_hbt": (1, 0.1, 5)}, weighting="x"))


def test_non_finite_start_raises():
    d = F.FitData(np.linspace(0, 1, 10), np.full(10, np.nan), np.ones(10))
    with pytest.raises(F.FitError):
        F.fit(F.FitProblem("exp_decay", d, {"amp": (1.0, None, None), "tau1": (1.0, 0.1, 10.0)}))


def test_result_json_round_trip():
    d = _data("hbt_cw", np.linspace(-20, 20, 81), sigma=np.full(81, 0.02), noise=1.0, b=0.9, tau_hbt=3.0)
    r = F.fit(F.FitProblem("hbt_cw", d, {"b": (0.5, 0.0, 1.0), "tau_hbt": (2.0, 0.1, 10.0)}))
    back = F.FitResult.from_dict(json.loads(r.to_json()))
    assert back.params == r.params and back.sigmas == r.sigmas
    assert np.array_equal(back.covariance, r.covariance)
    assert back.fixed == {"jitter_sigma": 0.0}
    assert "tau_hbt" in r.table() and "(fixed)" in r.table()


# ------------------------------------------------------------ recipes

def _poisson_hist(model_id, half_ns, bin_ps, scale, seed, **params):
    cfg = C.HistogramConfig.centered(int(half_ns * 1000), bin_ps)
    centers = 0.5 * (cfg.edges[:-1] + cfg.edges[1:]) / 1000
    mu = scale * M.evaluate(model_id, centers, **params)
    if M.get_model(model_id).density:
        mu = mu * bin_ps / 1000
    counts = np.random.default_rng(seed).poisson(mu)
    return C.Histogram(cfg.edges, counts, counts / scale, "plateau", float(scale))


def test_hbt_recipe_on_synthetic_data():
    h = _poisson_hist("hbt_cw", 100, 200, 2000, 1, b=0.97, tau_hbt=3.6, jitter_sigma=163.0)
    r = F.fit_recipe("hbt_cw", [h], {"jitter_sigma": 163.0})
    assert abs(r.params["b"] - 0.97) < 3 * r.sigmas["b"]
    assert abs(r.params["tau_hbt"] - 3.6) < 3 * r.sigmas["tau_hbt"]


def test_hom_cw_joint_recipe_on_synthetic_data():
    common = dict(delta_t=40.3, rt_ratio=1.1, tau_par=2.78, b=0.97, tau_hbt=3.6, jitter_sigma=163.0)
    par = _poisson_hist("hom_cw", 150, 200, 3000, 2, visibility=0.9, **common)
    perp = _poisson_hist("hom_cw", 150, 200, 3000, 3, visibility=0.0, **common)
    r = F.fit_recipe("hom_cw_joint", [par, perp], {"jitter_sigma": 163.0})
    for k, v in (("delta_t", 40.3), ("rt_ratio", 1.1), ("tau_par", 2.78), ("visibility", 0.9)):
        assert abs(r.params[k] - v) < 4 * r.sigmas[k], k
    with pytest.raises(ValueError):
        F.fit_recipe("hom_cw_joint", [par])


def test_lifetime_recipe_is_unbiased_on_sparse_tails():
    edges = np.arange(0, 40_001, 100)
    t = 0.5 * (edges[:-1] + edges[1:]) / 1000
    taus = []
    for seed in range(12):
        counts = np.random.default_rng(seed).poisson(300 * np.exp(-t / 4.0))
        taus.append(F.fit_recipe("lifetime", [C.Histogram(edges, counts)]).params["tau1"])
    taus = np.array(taus)
    assert abs(taus.mean() - 4.0) < 3 * taus.std(ddof=1) / math.sqrt(len(taus))
    many = F.fit_recipe("lifetime", [C.Histogram(edges, np.random.default_rng(1).poisson(300 * np.exp(-t / 4)))] * 2)
    mean, std = F.repeated_summary(many, "tau1")
    assert std == pytest.approx(0.0, abs=1e-12) and mean > 0


def test_lorentzian_recipe():
    x = np.linspace(-0.3, 0.3, 121)
    y = np.random.default_rng(0).poisson(20 + 2000 * 0.0275**2 / (x**2 + 0.0275**2)).astype(float)
    r = F.fit_recipe("lorentzian", [F.FitData(x, y, np.sqrt(np.maximum(y, 1)))])
    assert abs(r.params["fwhm"] - 55.0) < 3 * r.sigmas["fwhm"]


def test_hom_pulsed_recipe_requires_setup():
    h = _poisson_hist("hbt_cw", 50, 100, 10, 0, b=0.5, tau_hbt=1.0)
    with pytest.raises(ValueError, match="rt_ratio"):
        F.fit_recipe("hom_pulsed", [h], {"period": 40.0, "jitter_sigma": 0.0})
    with pytest.raises(ValueError):
        F.fit_recipe("nonsense", [h])
    with pytest.raises(ValueError):
        F.fit_recipe("hbt_cw", [])


def test_hom_pulsed_recipe_on_model_data():
    P = 40.3
    truth = dict(tau1=4.04, gamma_star=0.055, v=0.95, rt_ratio=1.1, jitter_sigma=163.0, period=P)
    h = _poisson_hist("hom_pulsed", 4.5 * P, 100, 4e5, 4, **truth)
    r = F.fit_recipe("hom_pulsed", [h], {"rt_ratio": 1.1, "jitter_sigma": 163.0, "period": P})
    for k in ("tau1", "gamma_star", "v"):
        assert abs(r.params[k] - truth[k]) < 3 * r.sigmas[k], k


def test_override_forms():
    free, fixed = F._free({"a": (1.0, 0.0, 2.0, False), "b": (2.0, None, None, True)},
                          {"a": 1.5, "b": {"value": 3.0, "lo": 0.0, "hi": 9.0, "fixed": False}})
    assert fixed == {"a": 1.5}
    assert free == {"b": (3.0, 0.0, 9.0)}


def test_guess_delay():
    x = np.linspace(-90, 90, 901)
    y = M.evaluate("hom_cw", x, delta_t=40.3, rt_ratio=1.1, visibility=0.0, tau_par=2.8, b=0.97, tau_hbt=3.6)
    assert F._guess_delay(F.FitData(x, y, np.ones_like(x))) == pytest.approx(40.3, abs=0.3)
    assert F._guess_delay(F.FitData(x[:10], y[:10], np.ones(10))) == 40.0


def test_delay_uncertainty_propagation():
    m = M.PulsedHomModel(4.04, 0.055, 0.95, 0.5238, 0.4762, 163.0, 40.3)
    assert F.propagate_delay_uncertainty(m, 0.0, 26.0) == 0.0
    with pytest.raises(ValueError):
        F.propagate_delay_uncertainty(m, -1.0, 26.0)
    s1 = F.propagate_delay_uncertainty(m, 0.1, 26.0)
    assert F.propagate_delay_uncertainty(m, 0.2, 26.0) == pytest.approx(2 * s1)
    # first-order slope agrees with the 0.2 ns finite drop within the cusp curvature
    drop = M.visibility_vs_offset(0.0, m, 26.0) - M.visibility_vs_offset(0.2, m, 26.0)
    assert 0.5 * drop < 2 * s1 < 2 * drop
