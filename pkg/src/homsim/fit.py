"""Weighted nonlinear least squares for the registry models.

The solver is a Levenberg-Marquardt loop over internally unconstrained
coordinates: strictly positive parameters are fitted in log space,
two-sided bounds through a logistic map. The Jacobian is a central finite
difference. Covariance is ``inv(J^T J) * chi2_red`` mapped back to the
physical parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from . import models
from .correlate import Histogram


class FitError(RuntimeError):
    pass


STEP_TOL = 1e-8
GRAD_TOL = 1e-10
MAX_ITER = 500


@dataclass
class FitData:
    """x (ns or GHz), y and 1-sigma errors; ``bin_width`` is used by density models."""

    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    bin_width: float = 1.0
    supersample: int = 1
    divisor: float = 1.0  # raw counts = y * divisor; used by model-variance weighting

    @classmethod
    def from_histogram(cls, hist: Histogram, fit_range: tuple[float, float] | None = None,
                       supersample: int = 1) -> "FitData":
        x = hist.centers / 1000.0
        sel = np.ones(len(x), bool)
        if fit_range is not None:
            sel = (x >= fit_range[0]) & (x <= fit_range[1])
        return cls(x[sel], np.asarray(hist.normalized, float)[sel], hist.sigma[sel],
                   hist.bin_width / 1000.0, supersample, float(hist.divisor))

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class FitProblem:
    model_id: str
    data: FitData | list[FitData]
    free_params: dict[str, tuple[float, float | None, float | None]]
    fixed_params: dict[str, float] = field(default_factory=dict)
    weights: list[np.ndarray] | None = None
    dataset_overrides: list[dict[str, float]] | None = None
    # "data": sigma from the observed counts (floor 1).  "model": Pearson
    # weighting, sigma^2 = max(model counts, 1), refined by reweighting.
    weighting: str = "data"

    def datasets(self) -> list[FitData]:
        return list(self.data) if isinstance(self.data, (list, tuple)) else [self.data]

    def validate(self) -> None:
        mdl = models.get_model(self.model_id)
        free, fixed = set(self.free_params), set(self.fixed_params)
        if free & fixed:
            raise ValueError(f"parameters both free and fixed: {sorted(free & fixed)}")
        missing = set(mdl.params) - free - fixed - set(mdl.defaults)
        if missing:
            raise ValueError(f"parameters neither free nor fixed: {sorted(missing)}")
        unknown = (free | fixed) - set(mdl.params)
        if unknown:
            raise ValueError(f"unknown parameters for {self.model_id}: {sorted(unknown)}")
        for name, (x0, lo, hi) in self.free_params.items():
            if (lo is not None and x0 < lo) or (hi is not None and x0 > hi):
                raise ValueError(f"initial value of {name} outside its bounds")
        if self.weighting not in ("data", "model"):
            raise ValueError("weighting must be 'data' or 'model'")
        n = sum(len(d) for d in self.datasets())
        if n < 2 * len(self.free_params):
            raise ValueError("need at least twice as many data points as free parameters")


@dataclass
class FitResult:
    model_id: str
    params: dict[str, float]
    sigmas: dict[str, float]
    covariance: np.ndarray
    free: list[str]
    fixed: dict[str, float]
    chi2_reduced: float
    n_iter: int
    converged: bool
    gradient_norm: float = 0.0
    message: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "params": {
                k: {"value": float(v), "sigma": float(self.sigmas.get(k, 0.0)), "fixed": k not in self.free}
                for k, v in self.params.items()
            },
            "free_order": list(self.free),
            "covariance": np.asarray(self.covariance).tolist(),
            "chi2_reduced": float(self.chi2_reduced),
            "iterations": int(self.n_iter),
            "converged": bool(self.converged),
            "gradient_norm": float(self.gradient_norm),
            "message": self.message,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FitResult":
        params = {k: v["value"] for k, v in d["params"].items()}
        sig = {k: v["sigma"] for k, v in d["params"].items() if not v["fixed"]}
        fixed = {k: v["value"] for k, v in d["params"].items() if v["fixed"]}
        return cls(d["model_id"], params, sig, np.array(d["covariance"]), list(d["free_order"]),
                   fixed, d["chi2_reduced"], d["iterations"], d["converged"],
                   d.get("gradient_norm", 0.0), d.get("message", ""))

    def table(self) -> str:
        lines = [f"model {self.model_id}  chi2_red={self.chi2_reduced:.4g}  "
                 f"iterations={self.n_iter}  converged={self.converged}"]
        for k, v in self.params.items():
            if k in self.free:
                lines.append(f"  {k:<14s} {v:>14.6g} +/- {self.sigmas[k]:.3g}")
            else:
                lines.append(f"  {k:<14s} {v:>14.6g}   (fixed)")
        return "\n".join(lines)


# ---------------------------------------------------------- transforms

class _Transform:
    """x = f(u) for one parameter."""

    def __init__(self, lo: float | None, hi: float | None, positive: bool):
        if lo is None and positive:
            lo = 0.0
        self.lo, self.hi = lo, hi

    def to_u(self, x: float) -> float:
        lo, hi = self.lo, self.hi
        if lo is not None and hi is not None:
            p = (x - lo) / (hi - lo)
            p = min(max(p, 1e-12), 1 - 1e-12)
            return math.log(p / (1 - p))
        if lo is not None:
            return math.log(max(x - lo, 1e-300))
        if hi is not None:
            return math.log(max(hi - x, 1e-300))
        return x

    def to_x(self, u: float) -> float:
        lo, hi = self.lo, self.hi
        if lo is not None and hi is not None:
            if u >= 0:
                s = 1.0 / (1.0 + math.exp(-u))
            else:
                e = math.exp(u)
                s = e / (1.0 + e)
            return lo + (hi - lo) * s
        if lo is not None:
            return lo + math.exp(min(u, 700.0))
        if hi is not None:
            return hi - math.exp(min(u, 700.0))
        return u

    def dx_du(self, u: float) -> float:
        lo, hi = self.lo, self.hi
        if lo is not None and hi is not None:
            s = (self.to_x(u) - lo) / (hi - lo)
            return (hi - lo) * s * (1 - s)
        if lo is not None:
            return math.exp(min(u, 700.0))
        if hi is not None:
            return -math.exp(min(u, 700.0))
        return 1.0


def _transforms(problem: FitProblem) -> list[_Transform]:
    mdl = models.get_model(problem.model_id)
    out = []
    for name, (_, lo, hi) in problem.free_params.items():
        if lo is None and hi is None and name in mdl.fractions:
            lo, hi = 0.0, 1.0
        out.append(_Transform(lo, hi, name in mdl.positive))
    return out


def _model_values(mdl: models.ModelSpec, d: FitData, params: dict[str, float]) -> np.ndarray:
    if mdl.density and d.supersample > 1:
        s = d.supersample
        off = (np.arange(s) + 0.5) / s - 0.5
        xs = (d.x[:, None] + off[None, :] * d.bin_width).ravel()
        return models.evaluate(mdl.id, xs, **params).reshape(len(d.x), s).mean(axis=1) * d.bin_width
    y = models.evaluate(mdl.id, d.x, **params)
    return y * d.bin_width if mdl.density else y


def numerical_jacobian(fun, u: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    f0 = fun(u)
    J = np.empty((len(f0), len(u)))
    for i in range(len(u)):
        h = rel_step * max(abs(u[i]), 1.0)
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        J[:, i] = (fun(up) - fun(dn)) / (2 * h)
    return J


def richardson_jacobian(fun, u: np.ndarray, rel_step: float = 1e-3) -> np.ndarray:
    """Richardson-extrapolated central difference (fourth order)."""
    f0 = fun(u)
    J = np.empty((len(f0), len(u)))
    for i in range(len(u)):
        h = rel_step * max(abs(u[i]), 1.0)
        cols = []
        for hh in (h, h / 2):
            up, dn = u.copy(), u.copy()
            up[i] += hh
            dn[i] -= hh
            cols.append((fun(up) - fun(dn)) / (2 * hh))
        J[:, i] = (4 * cols[1] - cols[0]) / 3
    return J


class _Objective:
    def __init__(self, problem: FitProblem):
        problem.validate()
        self.problem = problem
        self.mdl = models.get_model(problem.model_id)
        self.names = list(problem.free_params)
        self.tf = _transforms(problem)
        self.sets = problem.datasets()
        overrides = problem.dataset_overrides or [{} for _ in self.sets]
        if len(overrides) != len(self.sets):
            raise ValueError("dataset_overrides must match the number of datasets")
        self.overrides = overrides
        if problem.weights is not None:
            self.inv_sigma = [np.asarray(w, float) for w in problem.weights]
        else:
            self.inv_sigma = [1.0 / np.maximum(d.sigma, 1e-300) for d in self.sets]
        self.n_eval = 0

    def params(self, u: np.ndarray) -> dict[str, float]:
        p = dict(self.problem.fixed_params)
        for name, t, ui in zip(self.names, self.tf, u):
            p[name] = t.to_x(float(ui))
        return p

    def residuals(self, u: np.ndarray) -> np.ndarray:
        self.n_eval += 1
        base = self.params(u)
        out = []
        for d, ov, w in zip(self.sets, self.overrides, self.inv_sigma):
            y = _model_values(self.mdl, d, {**base, **ov})
            out.append((y - d.y) * w)
        return np.concatenate(out)


def fit(problem: FitProblem, max_iter: int = MAX_ITER) -> FitResult:
    """Levenberg-Marquardt fit; non-convergence is reported via ``converged=False``.

    With ``weighting="model"`` the fit is repeated with errors taken from
    the previous model prediction, which removes the downward bias that
    count-based weights give on sparse tails.
    """
    result = _fit_once(problem, max_iter)
    if problem.weighting == "data" or problem.weights is not None:
        return result
    mdl = models.get_model(problem.model_id)
    sets = problem.datasets()
    overrides = problem.dataset_overrides or [{} for _ in sets]
    for _ in range(3):
        weights = []
        for d, ov in zip(sets, overrides):
            mu = np.maximum(_model_values(mdl, d, {**result.params, **ov}) * d.divisor, 1.0)
            weights.append(d.divisor / np.sqrt(mu))
        start = {k: (result.params[k], lo, hi) for k, (_, lo, hi) in problem.free_params.items()}
        nxt = _fit_once(replace(problem, free_params=start, weights=weights), max_iter)
        shift = max(abs(nxt.params[k] - result.params[k]) / max(result.sigmas[k], 1e-300)
                    for k in problem.free_params)
        result = nxt
        if shift < 1e-3:
            break
    return result


def _fit_once(problem: FitProblem, max_iter: int) -> FitResult:
    obj = _Objective(problem)
    u = np.array([t.to_u(x0) for t, (x0, _, _) in zip(obj.tf, problem.free_params.values())])
    r = obj.residuals(u)
    if not np.all(np.isfinite(r)):
        raise FitError("model is not finite at the initial parameters")
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    message = "maximum iterations reached"
    it = 0
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        J = numerical_jacobian(obj.residuals, u)
        g = J.T @ r
        gnorm = float(np.linalg.norm(g))
        if gnorm < GRAD_TOL:
            converged, message = True, "gradient below tolerance"
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            u_new = u + step
            r_new = obj.residuals(u_new)
            c_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if c_new <= cost:
                accepted = True
                rel = np.linalg.norm(step) / (np.linalg.norm(u) + STEP_TOL)
                u, r, cost = u_new, r_new, c_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if np.linalg.norm(step) <= STEP_TOL * (np.linalg.norm(u) + STEP_TOL):
                break
        if not accepted:
            # no downhill step even with tiny steps: at a minimum to working precision
            converged, message = True, "no further decrease possible"
            break
        if rel < STEP_TOL:
            converged, message = True, "relative step below tolerance"
            break

    J = numerical_jacobian(obj.residuals, u)
    gnorm = float(np.linalg.norm(J.T @ r))
    n_pts = len(r)
    dof = max(n_pts - len(u), 1)
    chi2_red = cost / dof
    at = obj.params(u)
    D = np.array([t.dx_du(ui) for t, ui in zip(obj.tf, u)])
    # a parameter driven onto a bound has no curvature left in the internal
    # coordinate; report it at the bound and keep it out of the covariance
    pinned = np.array([abs(D[i]) < 1e-10 * (1 + abs(at[n])) for i, n in enumerate(obj.names)])
    live = ~pinned
    A = J[:, live].T @ J[:, live]
    if not live.any() or not np.all(np.isfinite(A)) or np.linalg.matrix_rank(A) < live.sum():
        state = ", ".join(f"{n}={at[n]:.6g}" for n in obj.names)
        raise FitError(f"singular Jacobian at {state}: parameters are not identifiable from these data")
    cov = np.zeros((len(u), len(u)))
    Dl = D[live]
    cov[np.ix_(live, live)] = np.linalg.inv(A) * chi2_red * np.outer(Dl, Dl)
    cov = 0.5 * (cov + cov.T)
    if pinned.any():
        message += f"; at bound: {[n for n, p in zip(obj.names, pinned) if p]}"
    params = obj.params(u)
    sig = {name: float(math.sqrt(max(cov[i, i], 0.0))) for i, name in enumerate(obj.names)}
    mdl = models.get_model(problem.model_id)
    full = {**mdl.defaults, **params}
    ordered = {k: float(full[k]) for k in mdl.params}
    return FitResult(problem.model_id, ordered, sig, cov, obj.names, dict(problem.fixed_params),
                     chi2_red, it, converged, gnorm, message)


# ------------------------------------------------------------------ recipes

RECIPES = ("hbt_cw", "hom_cw_joint", "lifetime", "lorentzian", "hom_pulsed")


def _free(table: dict, overrides: Mapping[str, Any]) -> tuple[dict, dict]:
    """Split recipe defaults into free/fixed, applying ``overrides``.

    An override that is a number fixes the parameter; a dict with ``value``
    (and optional ``lo``, ``hi``, ``fixed``) adjusts it.
    """
    free, fixed = {}, {}
    for name, (x0, lo, hi, is_fixed) in table.items():
        ov = overrides.get(name)
        if isinstance(ov, Mapping):
            x0 = ov.get("value", x0)
            lo = ov.get("lo", lo)
            hi = ov.get("hi", hi)
            is_fixed = ov.get("fixed", is_fixed)
        elif ov is not None:
            x0, is_fixed = float(ov), True
        if is_fixed:
            fixed[name] = x0
        else:
            free[name] = (x0, lo, hi)
    return free, fixed


def _check_binning(a: Histogram, b: Histogram) -> None:
    if not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("joint datasets must share the same binning")


def _hbt_start(data: FitData) -> tuple[float, float]:
    y0 = float(np.interp(0.0, data.x, data.y)) if len(data) else 0.0
    b0 = min(max(1.0 - y0, 0.05), 0.999)
    return b0, 3.0


def fit_recipe(kind: str, datasets: Sequence[Any], overrides: Mapping[str, Any] | None = None,
               fit_range: tuple[float, float] | None = None) -> FitResult | list[FitResult]:
    """Assemble and run the standard fits.

    ``hbt_cw``: one plateau-normalised histogram. ``hom_cw_joint``: parallel
    and orthogonal histograms sharing delay, splitting ratio and the HBT
    dip, with visibility forced to 0 on the orthogonal set. ``lifetime``:
    one or more decay histograms, one fit each. ``lorentzian``: FitData of a
    frequency scan. ``hom_pulsed``: peak-area-normalised histogram with
    (tau1, gamma*, v) free and the setup parameters fixed.
    """
    ov = dict(overrides or {})
    if kind not in RECIPES:
        raise ValueError(f"unknown recipe {kind!r}; known: {RECIPES}")
    if not datasets:
        raise ValueError(f"recipe {kind} needs at least one dataset")

    if kind == "hbt_cw":
        d = _as_data(datasets[0], fit_range or (-60.0, 60.0))
        b0, t0 = _hbt_start(d)
        table = {"b": (b0, 0.0, 1.0, False), "tau_hbt": (t0, 0.05, 100.0, False),
                "jitter_sigma": (0.0, None, None, True)}
        free, fixed = _free(table, ov)
        return fit(FitProblem("hbt_cw", d, free, fixed))

    if kind == "hom_cw_joint":
        if len(datasets) < 2:
            raise ValueError("hom_cw_joint needs parallel and orthogonal datasets")
        par, perp = datasets[0], datasets[1]
        if isinstance(par, Histogram) and isinstance(perp, Histogram):
            _check_binning(par, perp)
        rng_ = fit_range or (-90.0, 90.0)
        dp, do = _as_data(par, rng_), _as_data(perp, rng_)
        dt0 = ov.pop("delta_t_guess", None) or _guess_delay(do)
        table = {
            "delta_t": (dt0, max(dt0 - 10, 0.1), dt0 + 10, False),
            "rt_ratio": (1.0, 0.2, 5.0, False),
            "visibility": (0.8, 0.0, 1.0, False),
            "tau_par": (2.5, 0.05, 50.0, False),
            "b": (0.9, 0.0, 1.0, False),
            "tau_hbt": (3.5, 0.05, 50.0, False),
            "jitter_sigma": (0.0, None, None, True),
        }
        free, fixed = _free(table, ov)
        over_perp = {"visibility": 0.0}
        problem = FitProblem("hom_cw", [dp, do], free, fixed, dataset_overrides=[{}, over_perp])
        return fit(problem)

    if kind == "lifetime":
        results = []
        for ds in datasets:
            d = _as_data(ds, fit_range or (1.0, 30.0))
            amp0 = float(max(d.y.max(), 1.0)) * math.exp(d.x.min() / 4.0)
            table = {"amp": (amp0, None, None, False), "tau1": (4.0, 0.05, 100.0, False),
                    "offset": (0.0, None, None, True)}
            free, fixed = _free(table, ov)
            results.append(fit(FitProblem("exp_decay", d, free, fixed, weighting="model")))
        return results if len(results) > 1 else results[0]

    if kind == "lorentzian":
        d = _as_data(datasets[0], fit_range)
        i = int(np.argmax(d.y))
        table = {"nu0": (float(d.x[i]), None, None, False), "fwhm": (50.0, 0.01, 1e5, False),
                "amplitude": (float(max(d.y.max() - d.y.min(), 1.0)), None, None, False),
                "offset": (float(max(d.y.min(), 0.0)), None, None, False)}
        free, fixed = _free(table, ov)
        return fit(FitProblem("lorentzian", d, free, fixed))

    # hom_pulsed
    for key in ("rt_ratio", "jitter_sigma", "period"):
        if key not in ov:
            raise ValueError(f"hom_pulsed recipe needs fixed setup parameter {key!r}")
    period = float(ov["period"])
    d = _as_data(datasets[0], fit_range or (-period / 2, period / 2), supersample=4)
    table = {
        "tau1": (4.0, 0.1, 50.0, False),
        "gamma_star": (0.05, 1e-6, 10.0, False),
        "v": (0.9, 0.0, 1.0, False),
        "rt_ratio": (1.0, None, None, True),
        "jitter_sigma": (0.0, None, None, True),
        "period": (period, None, None, True),
        "offset": (0.0, None, None, True),
        "cycles": (1, None, None, True),
        "scale": (1.0, None, None, True),
    }
    free, fixed = _free(table, ov)
    return fit(FitProblem("hom_pulsed", d, free, fixed, weighting="model"))


def _as_data(ds: Any, fit_range: tuple[float, float] | None, supersample: int = 1) -> FitData:
    if isinstance(ds, FitData):
        if fit_range is None:
            return ds
        sel = (ds.x >= fit_range[0]) & (ds.x <= fit_range[1])
        return replace(ds, x=ds.x[sel], y=ds.y[sel], sigma=ds.sigma[sel])
    if isinstance(ds, Histogram):
        return FitData.from_histogram(ds, fit_range, supersample)
    raise TypeError(f"cannot fit data of type {type(ds).__name__}")


def _guess_delay(d: FitData) -> float:
    """Position of the side dip at positive delay in an orthogonal HOM curve.

    The search starts at 12 ns so the central antibunching dip is skipped.
    """
    sel = d.x > 12.0
    if not sel.any():
        return 40.0
    x, y = d.x[sel], d.y[sel]
    ys = uniform_filter1d(y, max(1, len(y) // 200), mode="nearest")
    return float(x[int(np.argmin(ys))])


def repeated_summary(results: Sequence[FitResult], name: str) -> tuple[float, float]:
    """Mean and sample standard deviation of one parameter over repeated fits."""
    vals = np.array([r.params[name] for r in results])
    return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0


# ------------------------------------------------------ error propagation

def propagate_delay_uncertainty(m: models.PulsedHomModel, sigma_delta: float, window: float,
                                h: float = 1e-3) -> float:
    """Visibility error caused by a delay mismatch uncertainty ``sigma_delta`` (ns).

    The visibility has a cusp at zero offset, so the slope is taken as the
    mean magnitude of the two one-sided differences around 0.
    """
    if sigma_delta < 0:
        raise ValueError("sigma_delta must be >= 0")
    if sigma_delta == 0:
        return 0.0
    v0 = models.visibility_vs_offset(0.0, m, window)
    vp = models.visibility_vs_offset(h, m, window)
    vm = models.visibility_vs_offset(-h, m, window)
    slope = (abs(vp - v0) + abs(vm - v0)) / (2 * h)
    return slope * sigma_delta
