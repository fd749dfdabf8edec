"""Generalised-method-of-moments calibration of BLIPR / BLRPR_X to a
:class:`~blrain.stats.StatisticVector`.

The objective is ``S = sum_i w_i (T_i - tau_i(theta))^2`` with ``tau`` the
analytic fitting properties. The search runs on ``z = log(theta)``, except
``z_alpha = log(alpha - alpha_min)``, so it is unconstrained. Points where
the moments diverge or the constraints fail score ``+inf``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import chi2

from .errors import (
    AlphaTooSmall,
    NoFeasibleStart,
    ParameterError,
    SingularCurvature,
    ThresholdNotBracketed,
    ZeroVariance,
)
from .moments import model_properties
from .params import (
    EXPONENTIAL,
    PARAM_NAMES,
    ConstraintSet,
    IntensityLaw,
    ModelParams,
    PulseDepthDependence,
    Variant,
    validate_params,
)
from .stats import StatisticVector

CI_LEVEL = 0.95
FD_STEP = 1e-5
FITTABLE = (Variant.BLIPR, Variant.BLRPR_X)


def chi2_threshold(level: float = CI_LEVEL) -> float:
    """Objective increase bounding a profile confidence interval."""
    return 0.5 * float(chi2.ppf(level, 1))


@dataclass(frozen=True)
class ObjectiveSpec:
    variant: Variant
    stats: StatisticVector
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    law: IntensityLaw = EXPONENTIAL
    dep: PulseDepthDependence = PulseDepthDependence.COMMON

    def __post_init__(self):
        v = Variant(self.variant)
        object.__setattr__(self, "variant", v)
        if v not in FITTABLE:
            raise ParameterError(f"{v.value} has no analytic moments to fit")
        unknown = set(self.constraints.fixed) - set(PARAM_NAMES[v])
        if unknown:
            raise ParameterError(f"fixed parameters {sorted(unknown)} not in {v.value}")
        if "alpha" in self.constraints.fixed:
            raise ParameterError("alpha cannot be fixed")
        var = self.stats.variances
        if not np.all(np.isfinite(var) & (var > 0)):
            raise ParameterError("statistic variances must be positive and finite")
        if self.stats.values.size <= len(self.free_names):
            raise ParameterError(
                f"{self.stats.values.size} properties cannot identify {len(self.free_names)} parameters"
            )

    @property
    def free_names(self) -> tuple[str, ...]:
        return tuple(n for n in PARAM_NAMES[self.variant] if n not in self.constraints.fixed)

    def tau(self, p: ModelParams) -> np.ndarray:
        return model_properties(p, self.law, self.dep, self.stats.timescales)

    # log-scale coordinates ---------------------------------------------
    def to_z(self, p: ModelParams, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.free_names if names is None else names
        amin = self.constraints.alpha_min
        out = []
        for n in names:
            v = p[n] - amin if n == "alpha" else p[n]
            if not v > 0:
                raise NoFeasibleStart(f"{n}={p[n]} is outside the search domain")
            out.append(math.log(v))
        return np.array(out)

    def from_z(self, z, names: Sequence[str] | None = None, base: Mapping[str, float] | None = None) -> ModelParams:
        names = self.free_names if names is None else names
        vals = dict(self.constraints.fixed)
        if base:
            vals.update(base)
        amin = self.constraints.alpha_min
        for n, zi in zip(names, z):
            vals[n] = amin + math.exp(zi) if n == "alpha" else math.exp(zi)
        return ModelParams(self.variant, vals)


class Evaluator:
    """Objective on the log scale with evaluation / penalty bookkeeping."""

    def __init__(self, spec: ObjectiveSpec, names: Sequence[str] | None = None,
                 base: Mapping[str, float] | None = None):
        self.spec = spec
        self.names = tuple(spec.free_names if names is None else names)
        self.base = dict(base or {})
        self.n_evals = 0
        self.n_penalties = 0

    def params(self, z) -> ModelParams:
        return self.spec.from_z(z, self.names, self.base)

    def __call__(self, z) -> float:
        self.n_evals += 1
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > 700):
            self.n_penalties += 1
            return math.inf
        try:
            return objective(self.params(z), self.spec)
        except (AlphaTooSmall, ParameterError, ZeroVariance, OverflowError, FloatingPointError):
            self.n_penalties += 1
            return math.inf

    def gradient(self, z, step: float = FD_STEP) -> np.ndarray:
        """Central differences; one-sided where a neighbour is infeasible."""
        z = np.asarray(z, dtype=float)
        f0 = None
        g = np.empty(z.size)
        for i in range(z.size):
            e = np.zeros(z.size)
            e[i] = step
            fp, fm = self(z + e), self(z - e)
            if math.isfinite(fp) and math.isfinite(fm):
                g[i] = (fp - fm) / (2 * step)
                continue
            f0 = self(z) if f0 is None else f0
            if math.isfinite(fp):
                g[i] = (fp - f0) / step
            elif math.isfinite(fm):
                g[i] = (f0 - fm) / step
            else:
                g[i] = 0.0
        return g


def objective(p: ModelParams, spec: ObjectiveSpec) -> float:
    """S(theta | T). Raises the underlying error for infeasible ``p``; the
    optimisers use :class:`Evaluator`, which maps those to ``+inf``."""
    validate_params(p, spec.constraints)
    tau = spec.tau(p)
    r = spec.stats.values - tau
    s = float(np.sum(spec.stats.weights * r * r))
    return s if math.isfinite(s) else math.inf


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 20
    sigma: float = 0.4
    n_refine: int = 5
    seed: int = 0
    rtol: float = 1e-8
    maxiter: int = 2000
    fd_step: float = FD_STEP
    project_start: bool = False


@dataclass(frozen=True)
class Interval:
    name: str
    estimate: float
    lo: float | None
    hi: float | None

    @property
    def bounded(self) -> bool:
        return self.lo is not None and self.hi is not None

    def contains(self, x: float) -> bool:
        lo = -math.inf if self.lo is None else self.lo
        hi = math.inf if self.hi is None else self.hi
        return lo <= x <= hi

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "lo": self.lo, "hi": self.hi, "bounded": self.bounded}


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    value: float
    converged: bool
    message: str
    n_evals: int
    n_penalties: int
    stage1: tuple[float, ...] = ()
    refinements: tuple[float, ...] = ()
    intervals: Mapping[str, Interval] = field(default_factory=dict)
    covariance: "ParameterCovariance | None" = None

    def to_dict(self) -> dict:
        doc = {
            "variant": self.params.variant.value,
            "params": dict(self.params.values),
            "objective": self.value,
            "converged": self.converged,
            "message": self.message,
            "evaluations": self.n_evals,
            "penalties": self.n_penalties,
            "stage1_objectives": list(self.stage1),
            "refinement_objectives": list(self.refinements),
            "confidence_intervals": {k: v.to_dict() for k, v in self.intervals.items()},
        }
        if self.params.month is not None:
            doc["month"] = self.params.month
        if self.covariance is not None:
            doc["log_covariance"] = self.covariance.to_dict()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _perturbed_starts(z0, n, sigma, seed):
    # start i depends only on (seed, i), so extra starts leave earlier ones unchanged
    out = [np.array(z0, dtype=float)]
    for i in range(1, n):
        rng = np.random.default_rng([int(seed), i])
        out.append(z0 + sigma * rng.standard_normal(z0.size))
    return out


def _nelder_mead(f, z, opts: FitOptions):
    f0 = f(z)
    res = optimize.minimize(
        f, z, method="Nelder-Mead",
        options={"maxiter": opts.maxiter, "maxfev": 4 * opts.maxiter, "xatol": 1e-8,
                 "fatol": opts.rtol * max(abs(f0), 1e-12) if math.isfinite(f0) else 1e-12,
                 "adaptive": z.size > 4},
    )
    return res.x, float(res.fun), bool(res.success)


def _bfgs(f: Evaluator, z, opts: FitOptions):
    res = optimize.minimize(f, z, jac=lambda x: f.gradient(x, opts.fd_step), method="BFGS",
                            options={"maxiter": opts.maxiter, "gtol": 1e-10})
    return res.x, float(res.fun)


def _refine(f: Evaluator, z, value, opts: FitOptions):
    """Chained quasi-Newton restarts; stops once a restart changes the
    objective by less than ``rtol`` relative."""
    trace = []
    converged = False
    for _ in range(opts.n_refine):
        z_new, v_new = _bfgs(f, z, opts)
        if not v_new <= value:
            trace.append(value)
            converged = True
            break
        change = (value - v_new) / max(abs(value), 1e-300)
        z, value = z_new, v_new
        trace.append(value)
        if change < opts.rtol or value == 0.0:
            converged = True
            break
    return z, value, converged, trace


def _feasible_start(spec: ObjectiveSpec, start: ModelParams, opts: FitOptions) -> ModelParams:
    amin = spec.constraints.alpha_min
    vals = {n: start[n] for n in start.names}
    vals.update(spec.constraints.fixed)
    if not vals["alpha"] > amin + spec.constraints.delta:
        if not opts.project_start:
            raise NoFeasibleStart(f"start alpha={vals['alpha']} is not above alpha_min={amin}")
        vals["alpha"] = amin + max(0.05, 0.05 * amin)
    for n in spec.free_names:
        if not vals[n] > 0:
            raise NoFeasibleStart(f"start {n}={vals[n]} is not positive")
    return ModelParams(spec.variant, vals, start.month)


def fit(spec: ObjectiveSpec, start: ModelParams, opts: FitOptions = FitOptions()) -> FitResult:
    """Two-stage fit: Nelder-Mead from the start and ``n_starts - 1``
    log-normal perturbations of it, then chained BFGS refinement of the best.

    Ties are broken by start index so the result does not depend on run
    order. Non-convergence is reported in the result, not raised.
    """
    start = _feasible_start(spec, start, opts)
    f = Evaluator(spec)
    z0 = spec.to_z(start)
    if not math.isfinite(f(z0)):
        raise NoFeasibleStart("objective is not finite at the start")
    results = []
    for i, zs in enumerate(_perturbed_starts(z0, max(opts.n_starts, 1), opts.sigma, opts.seed)):
        if not math.isfinite(f(zs)):
            results.append((math.inf, i, zs, False))
            continue
        z, v, ok = _nelder_mead(f, zs, opts)
        results.append((v, i, z, ok))
    stage1 = tuple(r[0] for r in results)
    best = min(results, key=lambda r: (r[0], r[1]))
    z, value, converged, trace = _refine(f, best[2], best[0], opts)
    p = spec.from_z(z)
    p = ModelParams(p.variant, dict(p.values), start.month)
    message = "converged" if converged else "refinement did not reach the relative tolerance"
    return FitResult(p, value, converged, message, f.n_evals, f.n_penalties, stage1, tuple(trace))


# profiles -------------------------------------------------------------------

@dataclass(frozen=True)
class ProfileCurve:
    name: str
    grid: np.ndarray
    values: np.ndarray  # S_p at each grid value; inf where the inner fit failed
    s_min: float
    estimate: float
    params: tuple = ()
    failed: tuple[int, ...] = ()

    def to_rows(self) -> list[tuple[str, float, float]]:
        return [(self.name, float(g), float(v)) for g, v in zip(self.grid, self.values)]


def _inner_opts(opts: FitOptions) -> FitOptions:
    return FitOptions(n_starts=1, n_refine=opts.n_refine, rtol=opts.rtol,
                      maxiter=opts.maxiter, fd_step=opts.fd_step)


def profile_value(spec: ObjectiveSpec, name: str, value: float, start: ModelParams,
                  opts: FitOptions = FitOptions()):
    """min over the other free parameters of S with ``name`` held at ``value``.
    Returns (S_p, params)."""
    others = tuple(n for n in spec.free_names if n != name)
    f = Evaluator(spec, others, {name: value})
    z0 = spec.to_z(start, others)
    v0 = f(z0)
    if not math.isfinite(v0):
        return math.inf, None
    io = _inner_opts(opts)
    z, v, _ = _nelder_mead(f, z0, io)
    if not v <= v0:
        z, v = z0, v0
    z, v, _, _ = _refine(f, z, v, io)
    return v, f.params(z)


def profile(spec: ObjectiveSpec, result: FitResult, name: str, grid: Sequence[float],
            opts: FitOptions = FitOptions()) -> ProfileCurve:
    """Profile objective over ``grid``, sweeping outward from the estimate
    with warm starts. Grid points whose inner fit fails are marked
    (value ``inf``) rather than aborting the sweep."""
    if name not in spec.free_names:
        raise ParameterError(f"{name} is not a free parameter")
    grid = np.sort(np.asarray(grid, dtype=float))
    est = result.params[name]
    centre = int(np.argmin(np.abs(grid - est)))
    values = np.full(grid.size, math.inf)
    params = [None] * grid.size
    failed = []
    for order in (range(centre, grid.size), range(centre - 1, -1, -1)):
        warm = result.params
        for i in order:
            try:
                v, p = profile_value(spec, name, float(grid[i]), warm, opts)
            except (NoFeasibleStart, ParameterError):
                v, p = math.inf, None
            if p is None:
                failed.append(i)
                continue
            values[i], params[i] = v, p
            warm = p
    return ProfileCurve(name, grid, values, result.value, est, tuple(params), tuple(sorted(failed)))


def profile_grid(result: FitResult, name: str, half_width: float = 1.0, n: int = 21,
                 alpha_min: float | None = None) -> np.ndarray:
    """Log-spaced grid of ``n`` points (odd ``n`` puts the estimate at the
    centre) spanning ``exp(+-half_width)`` times the estimate. For alpha the
    spacing applies to ``alpha - alpha_min``."""
    est = result.params[name]
    offs = np.linspace(-half_width, half_width, n)
    if name == "alpha" and alpha_min is not None:
        return alpha_min + (est - alpha_min) * np.exp(offs)
    return est * np.exp(offs)


def confidence_interval(curve: ProfileCurve, level: float = CI_LEVEL, strict: bool = False,
                        offset: float | None = None) -> Interval:
    """Region around the minimum where ``S_p <= S_min + chi2_1(level)/2``
    (or ``S_min + offset``), endpoints by linear interpolation between grid
    points. A side on which the curve never crosses the threshold is left
    open (``None``), or raises :class:`ThresholdNotBracketed` when ``strict``."""
    thr = curve.s_min + (chi2_threshold(level) if offset is None else offset)
    x, s = curve.grid, curve.values
    inside = s <= thr
    if not inside.any():
        raise ThresholdNotBracketed(f"{curve.name}: no grid point below the threshold")
    i0 = int(np.argmin(s))
    lo = hi = None
    i = i0
    while i > 0 and inside[i - 1]:
        i -= 1
    if i > 0 and math.isfinite(s[i - 1]):
        lo = float(np.interp(thr, [s[i], s[i - 1]], [x[i], x[i - 1]]))
    j = i0
    while j < x.size - 1 and inside[j + 1]:
        j += 1
    if j < x.size - 1 and math.isfinite(s[j + 1]):
        hi = float(np.interp(thr, [s[j], s[j + 1]], [x[j], x[j + 1]]))
    if strict and (lo is None or hi is None):
        raise ThresholdNotBracketed(f"{curve.name}: profile does not cross the threshold on both sides")
    return Interval(curve.name, curve.estimate, lo, hi)


def profile_interval(spec: ObjectiveSpec, result: FitResult, name: str, step: float = 0.1,
                     max_steps: int = 40, opts: FitOptions = FitOptions(), xtol: float = 1e-4,
                     offset: float | None = None) -> Interval:
    """Confidence interval by stepping outward on the log scale until the
    profile crosses the threshold, then root-finding inside the last step.
    Sides that never cross within ``max_steps`` are left open."""
    thr = result.value + (chi2_threshold() if offset is None else offset)
    est = result.params[name]
    amin = spec.constraints.alpha_min if name == "alpha" else 0.0
    to_x = lambda u: amin + (est - amin) * math.exp(u)  # noqa: E731
    ends = []
    for sign in (-1.0, 1.0):
        warm, u_in, end = result.params, 0.0, None
        for k in range(1, max_steps + 1):
            u = sign * step * k
            v, p = profile_value(spec, name, to_x(u), warm, opts)
            if p is None:
                break
            if v > thr:
                cache = {"warm": warm}

                def g(uu):
                    vv, pp = profile_value(spec, name, to_x(uu), cache["warm"], opts)
                    return vv - thr

                end = to_x(optimize.brentq(g, u_in, u, xtol=xtol))
                break
            warm, u_in = p, u
        ends.append(end)
    return Interval(name, est, ends[0], ends[1])


# asymptotic covariance -------------------------------------------------------

@dataclass(frozen=True)
class ParameterCovariance:
    """Sandwich covariance of ``log(theta)`` for the free parameters."""

    variant: Variant
    names: tuple[str, ...]
    mean: np.ndarray  # log(theta_hat)
    cov: np.ndarray
    fixed: Mapping[str, float]
    alpha_min: float

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def sample_log(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")

    def sample(self, n: int, seed: int) -> list[ModelParams]:
        """Draw parameter sets; draws with alpha not above ``alpha_min`` are
        redrawn so every sample satisfies the fitting constraint."""
        rng = np.random.default_rng(seed)
        out = []
        ia = self.names.index("alpha") if "alpha" in self.names else None
        while len(out) < n:
            z = rng.multivariate_normal(self.mean, self.cov, method="eigh")
            if ia is not None and not math.exp(z[ia]) > self.alpha_min:
                continue
            vals = dict(self.fixed)
            vals.update(zip(self.names, np.exp(z)))
            out.append(ModelParams(self.variant, vals))
        return out

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "cov": self.cov.tolist()}


def property_jacobian(spec: ObjectiveSpec, p: ModelParams, step: float = FD_STEP) -> np.ndarray:
    """d tau / d log(theta) for the free parameters, central differences."""
    names = spec.free_names
    z = np.log([p[n] for n in names])
    cols = []
    for i in range(z.size):
        vals = []
        for sgn in (1.0, -1.0):
            zz = z.copy()
            zz[i] += sgn * step
            q = ModelParams(spec.variant, {**dict(p.values), **dict(zip(names, np.exp(zz)))})
            vals.append(spec.tau(q))
        cols.append((vals[0] - vals[1]) / (2 * step))
    return np.array(cols).T


def parameter_covariance(spec: ObjectiveSpec, result: FitResult, sigma_t: np.ndarray | None = None,
                         step: float = FD_STEP, cond_max: float = 1e12) -> ParameterCovariance:
    """``(J'WJ)^-1 J'W Sigma_T W J (J'WJ)^-1`` with J the Jacobian of the
    model properties in log(theta) and W the diagonal weights. ``sigma_t``
    defaults to ``diag(Var(T))``; pass ``stats.covariance()`` for the full
    across-year estimate."""
    J = property_jacobian(spec, result.params, step)
    w = spec.stats.weights
    sigma = np.diag(spec.stats.variances) if sigma_t is None else np.asarray(sigma_t)
    A = J.T @ (w[:, None] * J)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > cond_max:
        raise SingularCurvature("curvature matrix is singular or ill-conditioned")
    Ainv = np.linalg.inv(A)
    B = J.T @ (w[:, None] * sigma * w[None, :]) @ J
    cov = Ainv @ B @ Ainv
    cov = 0.5 * (cov + cov.T)
    names = spec.free_names
    return ParameterCovariance(spec.variant, names, np.log([result.params[n] for n in names]), cov,
                               dict(spec.constraints.fixed), spec.constraints.alpha_min)


# defaults ------------------------------------------------------------------

DEFAULT_STARTS = {
    Variant.BLRPR_X: {"lambda": 0.02, "iota": 0.3, "alpha": 3.0, "nu": 0.5, "kappa": 0.5, "phi": 0.05},
    Variant.BLIPR: {"lambda": 0.025, "mu_x": 0.001, "alpha": 3.0, "nu": 0.5, "kappa": 0.5, "phi": 0.05,
                    "omega": 400.0},
}

DEFAULT_FIXED = {Variant.BLIPR: {"mu_x": 0.001}, Variant.BLRPR_X: {}}


def default_start(variant: Variant, alpha_min: float = 1.0) -> ModelParams:
    vals = dict(DEFAULT_STARTS[Variant(variant)])
    vals["alpha"] = max(vals["alpha"], alpha_min + 1.0)
    return ModelParams(Variant(variant), vals)
