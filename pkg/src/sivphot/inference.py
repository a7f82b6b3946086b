"""Nonlinear least-squares estimation of the emitter model.

Three fits chain together:

* :func:`fit_saturation` - count rate versus power (I_inf, Psat, c_backgr);
* :func:`fit_g2` - one coincidence histogram (a, tau1, tau2) with the
  background fraction and IRF width held fixed;
* :func:`fit_power_dependence` - the staged procedure on a(P), tau1(P),
  tau2(P): rates from limiting values, sigma from tau1(P) alone, then c from
  a(P) with sigma fixed, and finally the predicted tau2(P).

All optimizations run Levenberg-Marquardt (MINPACK through
``scipy.optimize.least_squares``) on internally transformed parameters:
``log`` for strictly positive and ``square`` for non-negative quantities.
Jacobians are central differences with a relative step of 1e-6.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import rate_model as rm
from .correlation import G2Histogram
from .errors import (ComplexEigenvalue, InvalidLimits, NoConvergence, OutOfRange,
                     StageDivergence)
from .rate_model import G2Shape, LimitingValues, RateCoefficients

XTOL = 1e-10
FTOL = 1e-12
MAX_ITER = 500
JAC_STEP = 1e-6
ILL_CONDITIONED = 1e12
STEP_INSIDE_MIN = 0.1


@dataclass
class FitResult:
    parameters: dict
    uncertainties: dict
    covariance: np.ndarray
    residual_norm: float          # weighted sum of squared residuals
    n_points: int
    converged: bool
    iterations: int
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.parameters[name]

    @property
    def names(self):
        return list(self.parameters)

    def to_dict(self) -> dict:
        return {
            "parameters": dict(self.parameters),
            "uncertainties": dict(self.uncertainties),
            "covariance": np.asarray(self.covariance).tolist(),
            "residual_norm": self.residual_norm,
            "n_points": self.n_points,
            "converged": self.converged,
            "iterations": self.iterations,
            "flags": list(self.flags),
            "diagnostics": _jsonable(self.diagnostics),
        }


@dataclass
class PowerSeries:
    """One quantity (a, tau1, tau2 or count rate) versus excitation power."""

    powers: np.ndarray
    values: np.ndarray
    errors: np.ndarray | None = None
    quantity: str = ""

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float)
            if self.errors.shape != self.values.shape:
                raise ValueError("errors must match values")
        if self.powers.shape != self.values.shape or self.powers.ndim != 1:
            raise ValueError("powers and values must be 1-D arrays of equal length")
        if np.any(self.powers <= 0) or np.any(np.diff(self.powers) <= 0):
            raise ValueError("powers must be > 0 and strictly increasing")

    def finite(self) -> "PowerSeries":
        """Copy without NaN values (e.g. tau2 where bunching was unresolved)."""
        ok = np.isfinite(self.values)
        if self.errors is not None:
            ok &= np.isfinite(self.errors) & (self.errors > 0)
        err = None if self.errors is None else self.errors[ok]
        return PowerSeries(self.powers[ok], self.values[ok], err, self.quantity)

    def sigma(self) -> np.ndarray:
        return np.ones_like(self.values) if self.errors is None else self.errors


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --- Levenberg-Marquardt core -------------------------------------------

_FORWARD = {"log": np.exp, "square": np.square, "none": lambda q: q}
_INVERSE = {"log": np.log, "square": np.sqrt, "none": lambda p: p}
_DERIV = {"log": np.exp, "square": lambda q: 2.0 * q, "none": np.ones_like}


def _lm(residual, p0: dict, transforms: dict, absolute_sigma: bool) -> FitResult:
    """Minimize |residual(params)|^2 with transformed parameters.

    ``residual`` receives a dict of natural parameters and returns the
    weighted residual vector.
    """
    names = list(p0)
    kinds = [transforms.get(n, "none") for n in names]

    def natural(q):
        return {n: float(_FORWARD[k](qi)) for n, k, qi in zip(names, kinds, q)}

    def fun(q):
        return residual(natural(q))

    def jac(q):
        cols = []
        for i in range(q.size):
            h = JAC_STEP * max(abs(q[i]), 1e-3)
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            cols.append((fun(qp) - fun(qm)) / (2 * h))
        return np.column_stack(cols)

    q0 = np.array([float(_INVERSE[k](p0[n])) for n, k in zip(names, kinds)])
    if not np.all(np.isfinite(q0)):
        raise ValueError(f"invalid initial guess {p0}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = least_squares(fun, q0, jac=jac, method="lm", xtol=XTOL, ftol=FTOL,
                            gtol=1e-15, max_nfev=MAX_ITER)
    r = sol.fun
    J = sol.jac
    ssr = float(r @ r)
    n, p = r.size, q0.size
    JTJ = J.T @ J
    flags = []
    cond = np.linalg.cond(JTJ) if np.all(np.isfinite(JTJ)) else np.inf
    if cond > ILL_CONDITIONED:
        flags.append("IllConditioned")
    cov_q = np.linalg.pinv(JTJ)
    if not absolute_sigma:
        cov_q = cov_q * (ssr / max(n - p, 1))
    D = np.diag([float(_DERIV[k](qi)) for k, qi in zip(kinds, sol.x)])
    cov = D @ cov_q @ D
    params = natural(sol.x)
    unc = {nm: float(math.sqrt(max(cov[i, i], 0.0))) for i, nm in enumerate(names)}
    return FitResult(params, unc, cov, ssr, n, bool(sol.status > 0), int(sol.nfev),
                     flags, {"condition_number": float(cond)})


def _require(fit: FitResult, what: str) -> FitResult:
    if not fit.converged or not all(np.isfinite(v) for v in fit.parameters.values()):
        err = NoConvergence(f"{what} did not converge after {fit.iterations} evaluations")
        err.result = fit
        raise err
    return fit


# --- saturation ------------------------------------------------------------

def _saturation_guess(P, I, w):
    """Grid over Psat with (I_inf, c_backgr) from non-negative linear LSQ."""
    best = None
    for psat in np.geomspace(P.min() / 10, P.max() * 10, 161):
        X = np.column_stack([P / (P + psat), P]) * w[:, None]
        y = I * w
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        if coef[1] < 0:
            coef = np.array([max((X[:, 0] @ y) / (X[:, 0] @ X[:, 0]), 0.0), 0.0])
        ssr = float(np.sum((X @ coef - y) ** 2))
        if coef[0] > 0 and (best is None or ssr < best[0]):
            best = (ssr, psat, coef)
    if best is None:
        raise NoConvergence("no positive saturation amplitude fits the data")
    return best[1], best[2][0], best[2][1]


def fit_saturation(data: PowerSeries) -> FitResult:
    """Fit I(P) = I_inf*P/(P + Psat) + c_backgr*P to a count-rate series."""
    if data.values.size < 4:
        raise ValueError("need at least 4 points for a saturation fit")
    P, I, s = data.powers, data.values, data.sigma()
    psat0, i0, c0 = _saturation_guess(P, I, 1.0 / s)
    c0 = max(c0, 1e-6 * i0 / P.max())

    def residual(p):
        return (rm.saturation_curve(p["I_inf"], p["Psat"], p["c_backgr"], P) - I) / s

    fit = _lm(residual, {"I_inf": i0, "Psat": psat0, "c_backgr": c0},
              {"I_inf": "log", "Psat": "log", "c_backgr": "square"},
              absolute_sigma=data.errors is not None)
    if not (P.min() < fit["Psat"] < P.max()):
        fit.flags.append("KneeOutsideData")
    return _require(fit, "saturation fit")


def signal_fraction(fit: FitResult, P):
    """pe(P): fraction of detections from the emitter under a saturation fit."""
    P = np.asarray(P, dtype=float)
    signal = fit["I_inf"] * P / (P + fit["Psat"])
    out = signal / (signal + fit["c_backgr"] * P)
    return float(out) if out.ndim == 0 else out


# --- g2 histogram ----------------------------------------------------------

def _g2_model(edges, a, tau1, tau2, pe, irf):
    """Bin-averaged model; the zero bin straddles the cusp of the dip."""
    e1 = rm.exp_gauss_edge_average(edges, tau1, irf)
    if a == 0.0:
        return 1.0 + (-e1) * pe * pe
    e2 = rm.exp_gauss_edge_average(edges, tau2, irf)
    return 1.0 + (-(1.0 + a) * e1 + a * e2) * pe * pe


def _fold_log(tau, g, sig, n_groups=150):
    """Fold |tau| and merge into log-spaced groups (weighted means)."""
    at = np.abs(tau)
    w = 1.0 / sig ** 2
    lo = max(at[at > 0].min() if np.any(at > 0) else 1.0, 1e-6)
    edges = np.concatenate([[0.0], np.geomspace(lo, at.max() * 1.0001, n_groups)])
    idx = np.clip(np.searchsorted(edges, at, side="right") - 1, 0, n_groups - 1)
    sw = np.bincount(idx, w, n_groups)
    ok = sw > 0
    gm = np.bincount(idx, w * g, n_groups)[ok] / sw[ok]
    tm = np.bincount(idx, w * at, n_groups)[ok] / sw[ok]
    return tm, gm, 1.0 / np.sqrt(sw[ok])


def _g2_initial_guess(tau, g, sig, pe, irf, width, span):
    """Grid over (tau1, tau2) with the bunching amplitude solved linearly."""
    tm, gm, sm = _fold_log(tau, g, sig)
    w = 1.0 / sm ** 2
    t1_grid = np.geomspace(width / 3, span / 3, 40)
    t2_grid = np.geomspace(width, span * 2, 40)
    E1 = np.array([rm.exp_gauss_conv(tm, t, irf) for t in t1_grid])
    E2 = np.array([rm.exp_gauss_conv(tm, t, irf) for t in t2_grid])
    pe2 = pe * pe
    best = (np.inf, t1_grid[0], t2_grid[-1], 0.0)
    for i, t1 in enumerate(t1_grid):
        base = 1.0 - pe2 * E1[i]
        y = gm - base
        for j, t2 in enumerate(t2_grid):
            if t2 < 2 * t1:
                continue
            x = pe2 * (E2[j] - E1[i])
            a = max(float(np.sum(w * x * y) / np.sum(w * x * x)), 0.0)
            ssr = float(np.sum(w * (y - a * x) ** 2))
            if ssr < best[0]:
                best = (ssr, t1, t2, a)
    return best[1:]


def fit_g2(hist: G2Histogram, pe: float = 1.0, irf_sigma: float = 0.0,
           bunching_threshold: float = 2.0, weights: str = "model",
           reweight_passes: int = 2) -> FitResult:
    """Fit the IRF-convolved, background-corrected three-level g2 to a histogram.

    The first pass uses Poisson weights from the raw counts,
    sqrt(max(counts, 1)).  With ``weights="model"`` (default) the fit is
    repeated ``reweight_passes`` times with the Poisson variance taken from
    the previous fitted model instead: raw-count weights favour bins that
    fluctuated low and shift the baseline by about -1/counts, which biases
    weak long bunching tails.  ``weights="counts"`` stops after the first
    pass.  When the fitted
    bunching amplitude is within ``bunching_threshold`` standard errors of
    zero the two-level form (a = 0) is refitted, tau2 is reported as NaN
    and the ``BunchingUnresolved`` flag is set.
    """
    tau = hist.centers
    edges = np.asarray(hist.bin_edges, dtype=float)
    counts = np.asarray(hist.counts, dtype=float)
    g = counts / hist.norm_constant
    sig = np.sqrt(np.maximum(counts, 1.0)) / hist.norm_constant
    width, span = hist.bin_width, hist.max_tau

    if weights not in ("model", "counts"):
        raise ValueError("weights must be 'model' or 'counts'")
    n_pass = 1 + (reweight_passes if weights == "model" else 0)
    N = hist.norm_constant

    t1_0, t2_0, a_0 = _g2_initial_guess(tau, g, sig, pe, irf_sigma, width, span)

    def residual3(p):
        return (g - _g2_model(edges, p["a"], p["tau1"], p["tau2"], pe, irf_sigma)) / sig

    def residual2(p):
        return (g - _g2_model(edges, 0.0, p["tau1"], 1.0, pe, irf_sigma)) / sig

    p0 = {"a": max(a_0, 1e-3), "tau1": t1_0, "tau2": t2_0}
    for _ in range(n_pass):
        fit = _lm(residual3, p0, {"a": "square", "tau1": "log", "tau2": "log"},
                  absolute_sigma=True)
        if not fit.converged:
            break
        p0 = dict(fit.parameters)
        p0["a"] = max(p0["a"], 1e-6)
        m = _g2_model(edges, fit["a"], fit["tau1"], fit["tau2"], pe, irf_sigma)
        sig = np.sqrt(np.maximum(m * N, 1.0)) / N
    unresolved = (not fit.converged or fit["a"] < bunching_threshold * fit.uncertainties["a"]
                  or fit["a"] < 1e-4)
    if unresolved:
        sig = np.sqrt(np.maximum(counts, 1.0)) / N
        p0 = {"tau1": t1_0}
        for _ in range(n_pass):
            two = _lm(residual2, p0, {"tau1": "log"}, absolute_sigma=True)
            _require(two, "two-level g2 fit")
            p0 = dict(two.parameters)
            m = _g2_model(edges, 0.0, two["tau1"], 1.0, pe, irf_sigma)
            sig = np.sqrt(np.maximum(m * N, 1.0)) / N
        cov = np.full((3, 3), np.nan)
        cov[0, 0] = 0.0
        cov[1, 1] = two.covariance[0, 0]
        fit = FitResult({"a": 0.0, "tau1": two["tau1"], "tau2": math.nan},
                        {"a": 0.0, "tau1": two.uncertainties["tau1"], "tau2": math.nan},
                        cov, two.residual_norm, two.n_points, two.converged,
                        two.iterations, two.flags + ["BunchingUnresolved"],
                        two.diagnostics)
    else:
        _require(fit, "g2 fit")
        if fit["tau2"] < fit["tau1"]:
            # the two exponentials are only labelled by their role
            fit.flags.append("TimesSwapped")
    p = fit.parameters
    center = int(np.argmin(np.abs(tau)))
    model0 = float(_g2_model(edges[center:center + 2], p["a"], p["tau1"],
                             p["tau2"] if np.isfinite(p["tau2"]) else 1.0, pe, irf_sigma)[0])
    fit.diagnostics.update({
        "g2_fit_at_zero": model0,
        "g2_data_at_zero": float(g[center]),
        "delta_g2_zero": abs(model0 - float(g[center])),
        "pe": pe,
        "irf_sigma": irf_sigma,
        "weights": weights,
        "reduced_chi2": fit.residual_norm / max(fit.n_points - 3, 1),
    })
    return fit


def shape_of(fit: FitResult) -> G2Shape:
    tau2 = fit["tau2"] if np.isfinite(fit["tau2"]) else fit["tau1"] * 1e6
    return G2Shape(a=fit["a"], tau1=fit["tau1"], tau2=tau2,
                   degenerate="BunchingUnresolved" in fit.flags)


# --- power dependence -----------------------------------------------------

@dataclass
class PowerFitResult(FitResult):
    rates: RateCoefficients | None = None
    limits: LimitingValues | None = None
    initial_limits: LimitingValues | None = None
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["rates"] = self.rates.as_dict() if self.rates else None
        out["limits"] = vars(self.limits) if self.limits else None
        out["initial_limits"] = vars(self.initial_limits) if self.initial_limits else None
        return out


def estimate_limits(series_a: PowerSeries, series_tau1: PowerSeries,
                    series_tau2: PowerSeries, n_low: int = 2, n_high: int = 3
                    ) -> LimitingValues:
    """Plateau estimates: tau1_0, tau2_0 from the lowest ``n_low`` powers,
    tau2_inf and a_inf from the highest ``n_high`` powers."""
    a, t1, t2 = series_a.finite(), series_tau1.finite(), series_tau2.finite()
    for s, n, name in ((t1, n_low, "tau1"), (t2, max(n_low, n_high), "tau2"),
                       (a, n_high, "a")):
        if s.values.size < n:
            raise InvalidLimits(f"too few finite {name} points for plateau estimates")
    return LimitingValues(
        tau1_0=float(np.mean(t1.values[:n_low])),
        tau2_0=float(np.mean(t2.values[:n_low])),
        tau2_inf=float(np.mean(t2.values[-n_high:])),
        a_inf=float(np.mean(a.values[-n_high:])),
    )


def _stage_sigma(rc, c, tau1: PowerSeries):
    P, y, s = tau1.powers, tau1.values, tau1.sigma()
    inv0 = rm.NS_PER_INV_MHZ / rm.limiting_values(rc).tau1_0
    drop = (rm.NS_PER_INV_MHZ / y - inv0) / P
    drop = drop[(y < 0.9 * y[0]) & (drop > 0)]
    sigma0 = float(np.median(drop)) if drop.size else inv0 / P.max()
    # de-shelving curvature is irrelevant for tau1 but c must be finite
    c_eval = c if np.isfinite(c) else 1.0

    def residual(p):
        _, t1, _ = rm.shape_arrays(rc.with_pump(p["sigma"], c_eval), P)
        return (t1 - y) / s

    try:
        fit = _lm(residual, {"sigma": sigma0}, {"sigma": "log"},
                  absolute_sigma=tau1.errors is not None)
    except (ValueError, ComplexEigenvalue) as exc:
        raise StageDivergence("sigma", str(exc)) from exc
    if not fit.converged or not np.isfinite(fit["sigma"]):
        raise StageDivergence("sigma", "tau1(P) fit did not converge")
    return fit


def _stage_c(rc, sigma, a: PowerSeries):
    P, y, s = a.powers, a.values, a.sigma()

    def model(c):
        return rm.shape_arrays(rc.with_pump(sigma, c), P)[0]

    grid = np.geomspace(P.min() * 1e-3, P.max() * 1e3, 121)
    ssr = [np.sum(((model(c) - y) / s) ** 2) for c in grid]
    c0 = float(grid[int(np.argmin(ssr))])

    def residual(p):
        return (model(p["c"]) - y) / s

    try:
        fit = _lm(residual, {"c": c0}, {"c": "log"}, absolute_sigma=a.errors is not None)
    except (ValueError, ComplexEigenvalue) as exc:
        raise StageDivergence("c", str(exc)) from exc
    if not fit.converged or not np.isfinite(fit["c"]):
        raise StageDivergence("c", "a(P) fit did not converge")
    return fit


def _corrected_limits(model: RateCoefficients, lv_obs_idx, a, t1, t2):
    """Plateau values divided by the model's approach ratio at the same powers."""
    lim = rm.limiting_values(model)
    low1, low2, high2, higha = lv_obs_idx

    def ratio_mean(series, idx, limit, which):
        shapes = rm.shape_arrays(model, series.powers[idx])[which]
        return float(np.mean(series.values[idx] * limit / shapes))

    return LimitingValues(
        tau1_0=ratio_mean(t1, low1, lim.tau1_0, 1),
        tau2_0=ratio_mean(t2, low2, lim.tau2_0, 2),
        tau2_inf=ratio_mean(t2, high2, lim.tau2_inf, 2),
        a_inf=ratio_mean(a, higha, lim.a_inf, 0),
    )


def _project_limits(lv: LimitingValues) -> LimitingValues:
    """Clamp tau2_0 >= (1 + a_inf) tau2_inf, i.e. d >= 0.

    Constant-rate data sit exactly on this bound, and plateau estimates
    from powers where tau2 has not fully levelled off fall just outside
    it.  At the bound k31 follows from the high-power plateaus alone.
    """
    floor = (1.0 + lv.a_inf) * lv.tau2_inf
    if lv.tau2_0 >= floor:
        return lv
    return LimitingValues(lv.tau1_0, floor, lv.tau2_inf, lv.a_inf)


def _run_stages(lv: LimitingValues, a: PowerSeries, t1: PowerSeries):
    """Stages 1-3 for given limits; sigma and c are each fitted twice so the
    weak dependence of tau1 on c is settled."""
    rc = rm.rates_from_limits(lv)
    c = math.nan
    c_fit = None
    for _ in range(2):
        sig_fit = _stage_sigma(rc, c, t1)
        if rc.d == 0.0:
            break
        c_fit = _stage_c(rc, sig_fit["sigma"], a)
        c = c_fit["c"]
    return rc, sig_fit, c_fit


_LIMIT_FIELDS = ("tau1_0", "tau2_0", "tau2_inf", "a_inf")


def _refine_limits(lv, idx, a, t1, t2, max_iter, tol):
    """Fixed point of limits -> staged fit -> model-corrected plateau values.

    Solved in log space as a Levenberg-Marquardt root problem on
    update(x) - x; a damped plain iteration is the fallback.  Returns (limits, evaluations, converged).
    """
    def update(x):
        cur = _project_limits(LimitingValues(*np.exp(x)))
        rc, sig_fit, c_fit = _run_stages(cur, a, t1)
        c = c_fit["c"] if c_fit is not None else 0.0
        new = _project_limits(_corrected_limits(rc.with_pump(sig_fit["sigma"], c),
                                                idx, a, t1, t2))
        return np.log([getattr(new, f) for f in _LIMIT_FIELDS])

    x0 = np.log([getattr(lv, f) for f in _LIMIT_FIELDS])

    def residual(x):
        try:
            return update(x) - x
        except (InvalidLimits, ComplexEigenvalue, StageDivergence, ValueError):
            # LM treats this as a failed step and shortens it
            return np.full(x.size, 1e3)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = least_squares(residual, x0, method="lm", diff_step=1e-5, xtol=1e-12,
                            ftol=1e-14, gtol=1e-15, max_nfev=max_iter)
    if np.max(np.abs(sol.fun)) < tol:
        return LimitingValues(*np.exp(sol.x)), int(sol.nfev), True

    # damped plain iteration; a failed update halves the last step
    x, step, prev, calls = x0, 1.0, None, 0
    for _ in range(max_iter):
        try:
            dx = update(x) - x
        except (InvalidLimits, ComplexEigenvalue, StageDivergence, ValueError):
            if prev is None or step < 1e-3:
                raise StageDivergence("refine", "corrected limits left the valid region") from None
            x = x - 0.5 * step * prev
            step /= 2
            continue
        x = x + step * dx
        prev = dx
        calls += 1
        if np.max(np.abs(dx)) < tol:
            return LimitingValues(*np.exp(x)), calls, True
    return LimitingValues(*np.exp(x)), calls, False


def fit_power_dependence(series_a: PowerSeries, series_tau1: PowerSeries,
                         series_tau2: PowerSeries, lv: LimitingValues | None = None,
                         refine: bool = True, n_low: int = 2, n_high: int = 3,
                         max_refine: int = 400, tol: float = 1e-7) -> PowerFitResult:
    """Staged fit of the intensity-dependent de-shelving model.

    Stage 1 inverts the limiting values into k21, k23, k31_0 and d.  Stage 2
    fits sigma to tau1(P).  Stage 3 fixes sigma and fits c to a(P).  With
    ``refine`` the plateau estimates are then corrected by the fitted
    model's own approach to its limits (observed value times
    limit/model-at-that-power) and stages 1-3 repeat until the limits stop
    changing.  A user-supplied ``lv`` is used as is and disables refinement.
    Stage 4 evaluates the predicted a, tau1 and tau2 curves.
    """
    a, t1, t2 = series_a.finite(), series_tau1.finite(), series_tau2.finite()
    user_limits = lv is not None
    if lv is None:
        lv = _project_limits(estimate_limits(a, t1, t2, n_low, n_high))
    initial = lv
    idx = (np.arange(min(n_low, t1.powers.size)),
           np.arange(min(n_low, t2.powers.size)),
           np.arange(t2.powers.size)[-n_high:],
           np.arange(a.powers.size)[-n_high:])
    flags = []
    if user_limits or not refine or lv.a_inf == 0.0:
        rc, sig_fit, c_fit = _run_stages(lv, a, t1)
        iterations = 1
    else:
        lv, iterations, ok = _refine_limits(lv, idx, a, t1, t2, max_refine, tol)
        lv = _project_limits(lv)
        if not ok:
            flags.append("RefinementNotConverged")
        try:
            rc, sig_fit, c_fit = _run_stages(lv, a, t1)
        except (InvalidLimits, ComplexEigenvalue) as exc:
            raise StageDivergence("refine", str(exc)) from exc
    sigma = sig_fit["sigma"]
    c = c_fit["c"] if c_fit is not None else math.nan

    c_unc = step_inside = math.nan
    if c_fit is None:
        flags.append("CUnidentifiable")
        rates = rc.with_pump(sigma, 0.0)
    else:
        c_unc = c_fit.uncertainties["c"]
        # share of the de-shelving step d*P/(P + c) realized between the
        # lowest and highest power; a step outside the data is flat in it
        p_lo, p_hi = a.powers.min(), a.powers.max()
        step_inside = p_hi / (p_hi + c) - p_lo / (p_lo + c)
        if not c_unc < c or step_inside < STEP_INSIDE_MIN:
            flags.append("CUnidentifiable")
        rates = rc.with_pump(sigma, c)

    cov = np.diag([sig_fit.uncertainties["sigma"] ** 2, c_unc ** 2])
    ssr = sig_fit.residual_norm + (c_fit.residual_norm if c_fit else 0.0)
    result = PowerFitResult(
        parameters={"sigma": sigma, "c": c},
        uncertainties={"sigma": sig_fit.uncertainties["sigma"], "c": c_unc},
        covariance=cov, residual_norm=ssr,
        n_points=t1.values.size + a.values.size, converged=True,
        iterations=iterations, flags=flags,
        diagnostics={"refinement_iterations": iterations,
                     "deshelving_step_inside_data": step_inside},
        rates=rates, limits=lv, initial_limits=initial,
    )
    result.curves = power_curves(rates, a.powers.min() / 3, a.powers.max() * 3)
    return result


def power_curves(rates: RateCoefficients, p_min: float, p_max: float, n: int = 200,
                 Psat: float | None = None) -> dict:
    """Predicted a, tau1, tau2 of the de-shelving model on a log power grid,
    plus the constant-rate counterpart when ``Psat`` is given."""
    P = np.geomspace(p_min, p_max, n)
    a, t1, t2 = rm.shape_arrays(rates, P)
    out = {"power": P, "a": a, "tau1": t1, "tau2": t2}
    if Psat is not None:
        k21, k23, k31, sigma = constant_rate_counterpart(rates, Psat)
        const = constant_rate_prediction(k21, k23, k31, sigma, P)
        out.update({f"{k}_const": v for k, v in const.items() if k != "power"})
    return out


def constant_rate_counterpart(rates: RateCoefficients, Psat: float):
    """(k21, k23, k31, sigma) of the constant-rate model sharing the same
    high-power limits: k31 is frozen at k31_0 + d and sigma follows from Psat."""
    k31 = rates.k31_inf
    return rates.k21, rates.k23, k31, rm.sigma_constant_rate_model(rates.k21, rates.k23, k31, Psat)


def constant_rate_prediction(k21: float, k23: float, k31: float, sigma: float, powers) -> dict:
    """a(P), tau1(P), tau2(P) when every rate except the pump is constant."""
    if min(k21, k23, k31, sigma) < 0 or k21 <= 0 or k31 <= 0:
        raise ValueError("rates must be positive")
    P = np.asarray(powers, dtype=float)
    a, t1, t2 = rm.shape_from_k(sigma * P, k21, k23, k31)
    return {"power": P, "a": a, "tau1": t1, "tau2": t2}


def estimate_quantum_efficiency(I_inf: float, rc: RateCoefficients, eta_det_int: float,
                                eta_coll: float) -> float:
    """eta_qe = I_inf / (eta_det_int * eta_coll * k21 * N2(P -> inf)), I_inf in cps."""
    for name, v in (("eta_det_int", eta_det_int), ("eta_coll", eta_coll)):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1]")
    n2 = rm.steady_state(rc, math.inf).n2
    qe = I_inf / (eta_det_int * eta_coll * rc.k21 * 1e6 * n2)
    if qe > 1.0:
        raise OutOfRange(f"quantum efficiency {qe:.3g} > 1: inputs are inconsistent")
    return qe
