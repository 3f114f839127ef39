"""Derivative-free minimization used by the nuisance and causal fits.

The effect families include floor truncations and hitting-time indicators, so
no gradient contract is imposed anywhere. Infinite objective values act as
domain barriers and are simply never accepted; NaN objectives are an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError

_REFLECT, _EXPAND, _CONTRACT, _SHRINK = 1.0, 2.0, 0.5, 0.5
_RESTART_ENTROPY = 0x5EEDED


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-12
    max_iter: int = 4000
    simplex_scale: float = 0.25
    restarts: int = 5

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if not self.max_iter >= 1:
            raise ValidationError("max_iter must be >= 1")
        if self.restarts < 0:
            raise ValidationError("restarts must be >= 0")


@dataclass
class NmResult:
    x: np.ndarray
    value: float
    converged: bool
    iterations: int


def _checked(objective, x):
    value = float(objective(x))
    if math.isnan(value):
        raise ValidationError(f"objective is NaN at {np.asarray(x).tolist()}")
    return value


def nelder_mead(objective, x0, options: SolveOptions | None = None) -> NmResult:
    """Simplex search with the standard reflect/expand/contract/shrink
    coefficients (1, 2, 0.5, 0.5); converged when the objective spread over
    the simplex drops below the tolerance and the simplex has contracted to
    the matching coordinate scale (a simplex straddling a symmetric minimum
    has zero spread long before it locates the argmin)."""
    opts = options or SolveOptions()
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1 or x0.size == 0:
        raise ValidationError("x0 must be a nonempty 1-d vector")
    f0 = _checked(objective, x0)
    if not math.isfinite(f0):
        raise ValidationError("objective must be finite at the starting point")

    k = x0.size
    simplex = [x0.copy()]
    for i in range(k):
        step = opts.simplex_scale * max(1.0, abs(x0[i]))
        vertex = x0.copy()
        vertex[i] += step
        simplex.append(vertex)
    values = [f0] + [_checked(objective, v) for v in simplex[1:]]

    iterations = 0
    while iterations < opts.max_iter:
        order = np.argsort(values, kind="stable")
        simplex = [simplex[j] for j in order]
        values = [values[j] for j in order]
        spread = values[-1] - values[0]
        best = simplex[0]
        diameter = max(float(np.max(np.abs(v - best))) for v in simplex[1:])
        x_tol = math.sqrt(opts.tolerance) * max(1.0, float(np.max(np.abs(best))))
        if not math.isinf(values[-1]) and spread < opts.tolerance and diameter < x_tol:
            return NmResult(best, values[0], True, iterations)
        iterations += 1

        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        reflected = centroid + _REFLECT * (centroid - worst)
        f_reflected = _checked(objective, reflected)
        if f_reflected < values[0]:
            expanded = centroid + _EXPAND * (reflected - centroid)
            f_expanded = _checked(objective, expanded)
            if f_expanded < f_reflected:
                simplex[-1], values[-1] = expanded, f_expanded
            else:
                simplex[-1], values[-1] = reflected, f_reflected
            continue
        if f_reflected < values[-2]:
            simplex[-1], values[-1] = reflected, f_reflected
            continue
        if f_reflected < values[-1]:
            contracted = centroid + _CONTRACT * (reflected - centroid)
        else:
            contracted = centroid - _CONTRACT * (centroid - worst)
        f_contracted = _checked(objective, contracted)
        if f_contracted < min(f_reflected, values[-1]):
            simplex[-1], values[-1] = contracted, f_contracted
            continue
        best = simplex[0]
        for j in range(1, k + 1):
            simplex[j] = best + _SHRINK * (simplex[j] - best)
            values[j] = _checked(objective, simplex[j])

    order = np.argsort(values, kind="stable")
    return NmResult(simplex[order[0]], values[order[0]], False, iterations)


def _restart_rng(index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=_RESTART_ENTROPY, spawn_key=(index,))
    )


def minimize_with_restarts(
    objective, x0, options: SolveOptions | None = None, domain=None
) -> NmResult:
    """Best result over the base start plus seeded jittered restarts.

    `domain`, when given, filters jittered starting points; the base start is
    always attempted.
    """
    opts = options or SolveOptions()
    x0 = np.asarray(x0, dtype=float)
    best: NmResult | None = None
    starts = [x0]
    for r in range(opts.restarts):
        rng = _restart_rng(r)
        for _ in range(100):
            jitter = rng.standard_normal(x0.size) * opts.simplex_scale * np.maximum(
                1.0, np.abs(x0)
            )
            candidate = x0 + jitter
            if domain is None or domain(candidate):
                starts.append(candidate)
                break
    for start in starts:
        if not math.isfinite(_checked(objective, start)):
            continue
        result = nelder_mead(objective, start, opts)
        if best is None or (result.value, not result.converged) < (
            best.value,
            not best.converged,
        ):
            best = result
    if best is None:
        raise ValidationError("objective is not finite at any starting point")
    return best


@dataclass
class StackedResult:
    x: np.ndarray
    residual_norm: float
    converged: bool


def solve_stacked(residuals, x0, options: SolveOptions | None = None, domain=None) -> StackedResult:
    """Least-squares root of a stacked residual map with at least as many
    equations as unknowns."""
    x0 = np.asarray(x0, dtype=float)
    r0 = np.asarray(residuals(x0), dtype=float)
    if r0.size < x0.size:
        raise ValidationError(
            f"stacked system has {r0.size} equations for {x0.size} unknowns"
        )

    def objective(x):
        if domain is not None and not domain(x):
            return math.inf
        r = np.asarray(residuals(x), dtype=float)
        return float(np.dot(r, r))

    result = minimize_with_restarts(objective, x0, options, domain=domain)
    return StackedResult(
        x=result.x, residual_norm=math.sqrt(max(result.value, 0.0)), converged=result.converged
    )


@dataclass
class GmmResult:
    gamma: object
    criterion: float
    report: object
    converged: bool


def gmm_fit(pipeline, gamma0, options: SolveOptions | None = None, domain=None) -> GmmResult:
    """Minimize a moment pipeline's criterion over the causal parameter.

    The parameter set is enforced by barrier rejection: points outside the
    family's domain (intersected with an optional extra `domain` restriction,
    e.g. data-implied hard bounds) evaluate to +inf and are never accepted.
    """
    opts = options or SolveOptions()
    param_type = pipeline.param_type
    if gamma0.family != param_type.family:
        raise ValidationError(
            f"family mismatch: start is {gamma0.family!r}, pipeline needs {param_type.family!r}"
        )

    def in_domain(vec):
        return param_type.in_domain(vec) and (domain is None or domain(vec))

    x0 = gamma0.to_vector()
    if not in_domain(x0):
        raise ValidationError("starting parameters are outside the searchable set")

    def objective(vec):
        if not in_domain(vec):
            return math.inf
        return pipeline.criterion(param_type.from_vector(vec))

    result = minimize_with_restarts(objective, x0, opts, domain=in_domain)
    if not result.converged:
        raise ConvergenceError(
            "no restart of the causal fit converged",
            best_x=result.x,
            best_value=result.value,
        )
    gamma = param_type.from_vector(result.x)
    return GmmResult(
        gamma=gamma,
        criterion=result.value,
        report=pipeline.report(gamma),
        converged=True,
    )
