"""Canonical decomposition of the treatment: drift models, compensators,
and martingale residual paths with respect to the observable history.

Residuals always start at 0 and satisfy W_t = W_0 + M_t + A_t exactly at every
grid point. Drift integrals use the left-endpoint rule, matching the cadlag
step-path convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, GridMismatchError, ValidationError
from .paths import Ensemble, SampledPath, SubjectTrajectory, TimeGrid
from .structural import hitting_index


class ResidualPath(SampledPath):
    """Estimated martingale part of the treatment; starts at 0."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(np.atleast_1d(self.values[0]) != 0.0):
            raise ValidationError("residual paths must start at 0")


class CompensatorPath(SampledPath):
    """Estimated predictable drift part of the treatment; starts at 0."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(np.atleast_1d(self.values[0]) != 0.0):
            raise ValidationError("compensator paths must start at 0")


@dataclass(frozen=True)
class OuNuisance:
    """Linear treatment-drift loadings and diffusion scale:
    dW = -(nu1 Y + nu2 W + nu3 Z) dt + nu4 dB."""

    nu1: float
    nu2: float
    nu3: float
    nu4: float
    family = "ou"

    def __post_init__(self):
        if not self.nu4 > 0:
            raise ValidationError("diffusion scale nu4 must be positive")

    def to_vector(self):
        return np.array([self.nu1, self.nu2, self.nu3, self.nu4])


@dataclass(frozen=True)
class DiscreteNuisance:
    """Pooled linear model of treatment increments on lagged (W, Y, Z)."""

    intercept: float
    coef_w: float
    coef_y: float
    coef_z: float
    family = "discrete"

    def to_vector(self):
        return np.array([self.intercept, self.coef_w, self.coef_y, self.coef_z])


@dataclass(frozen=True)
class TteNuisance:
    """Treatment-seeking threshold for the covariate."""

    alpha1: float
    family = "tte"

    def __post_init__(self):
        if not self.alpha1 > 0:
            raise ValidationError("alpha1 must be positive")


@dataclass(frozen=True)
class PosIntNuisance:
    """Baseline jump rate; clamp bounds are fixed model constants."""

    lam: float
    clamp_lo: float = -3.0
    clamp_hi: float = 3.0
    family = "posint"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lam must be positive")
        if not self.clamp_lo < self.clamp_hi:
            raise ValidationError("need clamp_lo < clamp_hi")


def _left_cumulative(values: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Cumulative left-endpoint integral along the last axis: out[..., k] =
    sum_{j<k} values[..., j] * dts[j], with out[..., 0] = 0."""
    out = np.zeros_like(values)
    out[..., 1:] = np.cumsum(values[..., :-1] * dts, axis=-1)
    return out


def _scalar_arrays(ensemble: Ensemble):
    if ensemble.q != 1:
        raise ValidationError("decomposition supports scalar treatments")
    W = ensemble.W[:, :, 0]
    Y = ensemble.Y
    Z = ensemble.Z[:, :, 0] if ensemble.n_covariates else np.zeros_like(Y)
    return W, Y, Z


# ---------------------------------------------------------------------------
# OU family
# ---------------------------------------------------------------------------


def ou_residual_matrix(ensemble: Ensemble, nu1, nu2, nu3) -> np.ndarray:
    """Residual values (n, L+1) for given drift loadings."""
    W, Y, Z = _scalar_arrays(ensemble)
    dts = np.diff(ensemble.grid.points)
    drift = nu1 * Y + nu2 * W + nu3 * Z
    return (W - W[:, :1]) + _left_cumulative(drift, dts)


def ou_residual(traj: SubjectTrajectory, nu: OuNuisance) -> ResidualPath:
    """Treatment minus its start plus the integrated linear drift."""
    if not traj.w.is_scalar:
        raise ValidationError("family mismatch: ou residuals need a scalar treatment")
    w = traj.w.values
    y = traj.y.values
    z = traj.z.values if traj.z.is_scalar else traj.z.values[:, 0]
    dts = np.diff(traj.grid.points)
    drift = nu.nu1 * y + nu.nu2 * w + nu.nu3 * z
    return ResidualPath(traj.grid, (w - w[0]) + _left_cumulative(drift, dts))


def ou_residuals(ensemble: Ensemble, nu: OuNuisance) -> list[ResidualPath]:
    M = ou_residual_matrix(ensemble, nu.nu1, nu.nu2, nu.nu3)
    return [ResidualPath(ensemble.grid, M[i]) for i in range(ensemble.n)]


def default_nuisance_times(grid: TimeGrid, count: int = 10) -> np.ndarray:
    """`count` roughly equidistant positive grid times ending at the horizon."""
    L = grid.steps
    idx = sorted({max(1, round(j * L / count)) for j in range(1, count + 1)})
    return grid.points[np.asarray(idx)]


class _OuEquationCache:
    """Precomputed cumulative integrals so the stacked equations are cheap to
    re-evaluate inside the optimizer."""

    def __init__(self, ensemble: Ensemble, grid_times):
        grid_times = np.asarray(grid_times, dtype=float)
        if grid_times.size == 0:
            raise ValidationError("grid_times must be nonempty")
        if np.any(np.diff(grid_times) <= 0):
            raise ValidationError("grid_times must be strictly increasing")
        if grid_times[0] <= 0:
            raise ValidationError("grid_times must start after 0")
        idx = np.asarray([ensemble.grid.index_of(t) for t in grid_times])
        W, Y, Z = _scalar_arrays(ensemble)
        dts = np.diff(ensemble.grid.points)
        self.times = grid_times
        self.dW = (W - W[:, :1])[:, idx]
        self.IY = _left_cumulative(Y, dts)[:, idx]
        self.IW = _left_cumulative(W, dts)[:, idx]
        self.IZ = _left_cumulative(Z, dts)[:, idx]

    def residual_columns(self, nu1, nu2, nu3) -> np.ndarray:
        return self.dW + nu1 * self.IY + nu2 * self.IW + nu3 * self.IZ

    def equations(self, nu1, nu2, nu3, nu4) -> np.ndarray:
        M = self.residual_columns(nu1, nu2, nu3)
        mean_r = M.mean(axis=0)
        var_r = (M**2).mean(axis=0) - nu4**2 * self.times
        prev = np.concatenate([np.zeros((M.shape[0], 1)), M[:, :-1]], axis=1)
        orth_r = (prev * (M - prev)).mean(axis=0)
        return np.concatenate([mean_r, var_r, orth_r])


def ou_nuisance_equations(ensemble: Ensemble, nu: OuNuisance, grid_times) -> np.ndarray:
    """Stacked mean / second-moment / increment-orthogonality residuals, one
    triple of blocks over the evaluation times."""
    cache = _OuEquationCache(ensemble, grid_times)
    return cache.equations(nu.nu1, nu.nu2, nu.nu3, nu.nu4)


def ou_increment_drift(ensemble: Ensemble, hide_z: bool = False):
    """Pooled increment-level drift regression (Euler pseudo-likelihood).

    Regresses treatment increments on the dt-scaled lagged state. Far more
    precise than the stacked-equation fit (it uses every increment), and its
    residual paths are in-sample orthogonal to the pooled history regressors,
    which is what a calibrated drift diagnostic needs. Returns the fitted
    nuisance and the per-subject residual paths built from the regression
    residuals themselves.
    """
    W, Y, Z = _scalar_arrays(ensemble)
    dts = np.diff(ensemble.grid.points)
    dW = np.diff(W, axis=1)
    cols = [np.broadcast_to(dts, dW.shape), Y[:, :-1] * dts, W[:, :-1] * dts]
    if not hide_z:
        cols.append(Z[:, :-1] * dts)
    X = np.stack([c.ravel() for c in cols], axis=1)
    coef, *_ = np.linalg.lstsq(X, dW.ravel(), rcond=None)
    resid = dW.ravel() - X @ coef
    nu4 = float(np.std(resid) / math.sqrt(np.mean(dts)))
    if nu4 <= _NU4_FLOOR:
        raise ConvergenceError("degenerate data: no treatment noise after drift removal")
    nu = OuNuisance(
        nu1=float(-coef[1]),
        nu2=float(-coef[2]),
        nu3=0.0 if hide_z else float(-coef[3]),
        nu4=nu4,
    )
    M = np.concatenate(
        [np.zeros((ensemble.n, 1)), np.cumsum(resid.reshape(dW.shape), axis=1)], axis=1
    )
    paths = [ResidualPath(ensemble.grid, M[i]) for i in range(ensemble.n)]
    return nu, paths


def _qv_scale(ensemble: Ensemble) -> float:
    W = ensemble.W[:, :, 0]
    qv = float(np.mean(np.sum(np.diff(W, axis=1) ** 2, axis=1)))
    return math.sqrt(qv / ensemble.grid.horizon)


@dataclass(frozen=True)
class NuisanceFit:
    params: object
    residual_norm: float
    converged: bool


_NU4_FLOOR = 1e-8


def estimate_ou_nuisance(
    ensemble: Ensemble,
    grid_times=None,
    init: OuNuisance | None = None,
    options=None,
    hide_z: bool = False,
) -> NuisanceFit:
    """Fit the linear drift nuisance by least squares on the stacked equations.

    `hide_z` drops the covariate from the drift model (the negative-control
    configuration for the confounding diagnostic).
    """
    from .solve import SolveOptions, minimize_with_restarts

    if grid_times is None:
        grid_times = default_nuisance_times(ensemble.grid)
    cache = _OuEquationCache(ensemble, grid_times)
    if len(cache.times) < 2:
        raise ValidationError("need at least 2 evaluation times (>= 4 stacked equations)")
    options = options or SolveOptions(tolerance=1e-14)

    qv = _qv_scale(ensemble)
    if qv <= _NU4_FLOOR:
        raise ConvergenceError(
            "degenerate data: treatment quadratic variation is zero, nu4 > 0 unattainable"
        )
    if init is None:
        x0 = np.array([0.0, 0.0, 0.0, qv])
    else:
        x0 = init.to_vector()
    if hide_z:
        x0 = x0[[0, 1, 3]]

    def objective(x):
        nu4 = x[-1]
        if nu4 <= 0:
            return math.inf
        if hide_z:
            r = cache.equations(x[0], x[1], 0.0, nu4)
        else:
            r = cache.equations(x[0], x[1], x[2], nu4)
        return float(np.dot(r, r))

    result = minimize_with_restarts(objective, x0, options)
    if not result.converged:
        raise ConvergenceError(
            "nuisance estimation did not converge",
            best_x=result.x,
            best_value=result.value,
        )
    x = result.x
    if x[-1] <= _NU4_FLOOR:
        raise ConvergenceError(
            "nuisance fit collapsed to nu4 = 0 (no treatment noise)",
            best_x=x,
            best_value=result.value,
        )
    if hide_z:
        params = OuNuisance(nu1=x[0], nu2=x[1], nu3=0.0, nu4=x[2])
    else:
        params = OuNuisance(nu1=x[0], nu2=x[1], nu3=x[2], nu4=x[3])
    return NuisanceFit(params=params, residual_norm=math.sqrt(result.value), converged=True)


# ---------------------------------------------------------------------------
# Counting-treatment families
# ---------------------------------------------------------------------------


def _check_counting_treatment(w: np.ndarray) -> None:
    if np.any((w != 0.0) & (w != 1.0)) or np.any(np.diff(w) < 0):
        raise ValidationError(
            "family mismatch: counting compensator needs a monotone 0/1 treatment path"
        )


def counting_compensator(traj: SubjectTrajectory, iota1: float) -> CompensatorPath:
    """Integral of (seeking started) x (not yet treated) over time, on the grid."""
    if not traj.w.is_scalar:
        raise ValidationError("family mismatch: counting compensator needs a scalar treatment")
    w = traj.w.values
    _check_counting_treatment(w)
    pts = traj.grid.points
    dts = np.diff(pts)
    active = (pts[:-1] >= iota1).astype(float) if math.isfinite(iota1) else np.zeros(len(pts) - 1)
    increments = active * (1.0 - w[:-1]) * dts
    return CompensatorPath(traj.grid, np.concatenate([[0.0], np.cumsum(increments)]))


def tte_iota1_times(ensemble: Ensemble, alpha1: float) -> np.ndarray:
    """Per-subject first grid time the covariate reaches alpha1 (inf if never)."""
    Z = ensemble.Z[:, :, 0]
    out = np.full(ensemble.n, math.inf)
    for i in range(ensemble.n):
        k = hitting_index(Z[i], alpha1)
        if k is not None:
            out[i] = ensemble.grid.points[k]
    return out


def tte_residuals(ensemble: Ensemble, alpha1: float) -> list[ResidualPath]:
    iotas = tte_iota1_times(ensemble, alpha1)
    out = []
    for i, traj in enumerate(ensemble.subjects()):
        comp = counting_compensator(traj, iotas[i])
        out.append(residual_from_compensator(traj, comp))
    return out


def estimate_tte_alpha0(ensemble: Ensemble) -> float:
    """Covariate volatility from realized quadratic variation."""
    Z = ensemble.Z[:, :, 0]
    qv = float(np.mean(np.sum(np.diff(Z, axis=1) ** 2, axis=1)))
    return math.sqrt(qv / ensemble.grid.horizon)


def estimate_tte_alpha1(ensemble: Ensemble) -> float:
    """Treatment-seeking threshold estimate.

    Every treated subject caps the threshold by the covariate's running
    maximum at the treatment jump; the cap is then refined by matching the
    compensator mass to the observed jump frequency (the mean-zero residual
    equation is monotone in the threshold).
    """
    W, _, Z = _scalar_arrays(ensemble)
    jumped = W[:, -1] > 0
    if not np.any(jumped):
        raise ConvergenceError("no treated subjects: alpha1 is not estimable")
    running_max = np.maximum.accumulate(Z, axis=1)
    bound = math.inf
    for i in np.nonzero(jumped)[0]:
        jump_k = int(np.nonzero(W[i] > 0)[0][0])
        bound = min(bound, float(running_max[i, jump_k]))

    return _refine_alpha1(ensemble, W, running_max, bound)


def _refine_alpha1(ensemble, W, running_max, bound) -> float:
    # Root of  mean(W_T - W_0) - mean(A_T(alpha))  over candidate thresholds.
    # Mass at knots above the bound accrues for every candidate alpha <= bound.
    dts = np.diff(ensemble.grid.points)
    weights = ((1.0 - W[:, :-1]) * dts / ensemble.n).ravel()
    knots = running_max[:, :-1].ravel()
    positive = weights > 0
    base_mass = float(np.sum(weights[positive & (knots > bound)]))
    keep = positive & (knots > 0) & (knots <= bound)
    if not np.any(keep):
        return bound
    knots, weights = knots[keep], weights[keep]
    order = np.argsort(-knots)
    knots, cum = knots[order], base_mass + np.cumsum(weights[order])
    target = float(np.mean(W[:, -1] - W[:, 0]))
    best = int(np.argmin(np.abs(cum - target)))
    return float(knots[best])


def tte_alpha2_bounds(ensemble: Ensemble) -> tuple[float, float]:
    """Hard data constraints on the adverse-event threshold.

    An observed outcome jump pins the threshold to (covariate running max just
    before the jump, covariate value at the jump]; a subject whose covariate
    reached a level while the jump was not suppressed but who never jumped
    pushes the threshold above that level. Returns (floor, cap); any threshold
    consistent with the data lies in (floor, cap].
    """
    W, Y, Z = _scalar_arrays(ensemble)
    running_max = np.maximum.accumulate(Z, axis=1)
    floor = 0.0
    cap = math.inf
    for i in range(ensemble.n):
        y_jumps = np.nonzero(Y[i] > 0)[0]
        if y_jumps.size:
            k = int(y_jumps[0])
            cap = min(cap, float(Z[i, k]))
            if k > 0:
                floor = max(floor, float(running_max[i, k - 1]))
        else:
            # threshold not reached while the jump was still possible
            w_jumps = np.nonzero(W[i] > 0)[0]
            upto = int(w_jumps[0]) if w_jumps.size else len(Y[i]) - 1
            floor = max(floor, float(running_max[i, upto]))
    return floor, cap


# ---------------------------------------------------------------------------
# Discrete family
# ---------------------------------------------------------------------------

_DISCRETE_COLUMNS = ("intercept", "lag W", "lag Y", "lag Z")


def _discrete_design(ensemble: Ensemble):
    W, Y, Z = _scalar_arrays(ensemble)
    dW = np.diff(W, axis=1).ravel()
    ones = np.ones_like(W[:, :-1])
    X = np.stack([ones.ravel(), W[:, :-1].ravel(), Y[:, :-1].ravel(), Z[:, :-1].ravel()], axis=1)
    return X, dW


def _fitted_compensators(ensemble: Ensemble, coef: np.ndarray) -> list[CompensatorPath]:
    W, Y, Z = _scalar_arrays(ensemble)
    fitted = coef[0] + coef[1] * W[:, :-1] + coef[2] * Y[:, :-1] + coef[3] * Z[:, :-1]
    A = np.concatenate([np.zeros((ensemble.n, 1)), np.cumsum(fitted, axis=1)], axis=1)
    return [CompensatorPath(ensemble.grid, A[i]) for i in range(ensemble.n)]


def discrete_compensator_fit(
    ensemble: Ensemble,
) -> tuple[DiscreteNuisance, list[CompensatorPath]]:
    """Pooled least squares of treatment increments on the lagged state, and
    the per-subject cumulative fitted increments."""
    X, dW = _discrete_design(ensemble)
    if X.shape[0] <= X.shape[1]:
        raise ValidationError("need more pooled increments than regressors")
    _, singular, vt = np.linalg.svd(X, full_matrices=False)
    if singular[-1] <= 1e-10 * singular[0]:
        null = np.abs(vt[-1])
        names = [name for name, load in zip(_DISCRETE_COLUMNS, null) if load > 1e-6]
        raise ValidationError(f"singular design: collinear columns {names}")
    coef, *_ = np.linalg.lstsq(X, dW, rcond=None)
    nuisance = DiscreteNuisance(
        intercept=float(coef[0]), coef_w=float(coef[1]), coef_y=float(coef[2]), coef_z=float(coef[3])
    )
    return nuisance, _fitted_compensators(ensemble, coef)


def discrete_compensator_from_coefficients(
    ensemble: Ensemble, nuisance: DiscreteNuisance
) -> list[CompensatorPath]:
    """Compensators from known assignment coefficients (oracle route)."""
    return _fitted_compensators(ensemble, nuisance.to_vector())


# ---------------------------------------------------------------------------
# Positive-intensity family
# ---------------------------------------------------------------------------


def posint_rate_values(
    y: np.ndarray, z: np.ndarray, lam: float, clamp_lo: float, clamp_hi: float
) -> np.ndarray:
    return lam * np.exp(np.clip(z + y, clamp_lo, clamp_hi))


def posint_compensator(
    traj: SubjectTrajectory, lam: float, clamp_lo: float = -3.0, clamp_hi: float = 3.0
) -> CompensatorPath:
    """Integrated jump rate lam * exp(clamp(Z + Y)) by the left-endpoint rule."""
    if not lam > 0:
        raise ValidationError("lam must be positive")
    y = traj.y.values
    z = traj.z.values if traj.z.is_scalar else traj.z.values[:, 0]
    rate = posint_rate_values(y, z, lam, clamp_lo, clamp_hi)
    dts = np.diff(traj.grid.points)
    return CompensatorPath(traj.grid, _left_cumulative(rate, dts))


def estimate_posint_rate(
    ensemble: Ensemble, clamp_lo: float = -3.0, clamp_hi: float = 3.0
) -> float:
    """Moment estimator of the baseline rate: observed terminal dose over the
    integrated clamped exponential."""
    W, Y, Z = _scalar_arrays(ensemble)
    dts = np.diff(ensemble.grid.points)
    expo = np.exp(np.clip(Z + Y, clamp_lo, clamp_hi))
    denom = float(np.mean(np.sum(expo[:, :-1] * dts, axis=1)))
    numer = float(np.mean(W[:, -1] - W[:, 0]))
    if denom <= 0 or numer <= 0:
        raise ConvergenceError("cannot estimate a positive baseline rate from this data")
    return numer / denom


def posint_residuals(ensemble: Ensemble, nuisance: PosIntNuisance) -> list[ResidualPath]:
    out = []
    for traj in ensemble.subjects():
        comp = posint_compensator(traj, nuisance.lam, nuisance.clamp_lo, nuisance.clamp_hi)
        out.append(residual_from_compensator(traj, comp))
    return out


def posint_rate_matrix(ensemble: Ensemble, nuisance: PosIntNuisance) -> np.ndarray:
    """Jump-rate values (n, L+1); the moment machinery left-shifts them."""
    _, Y, Z = _scalar_arrays(ensemble)
    return posint_rate_values(Y, Z, nuisance.lam, nuisance.clamp_lo, nuisance.clamp_hi)


# ---------------------------------------------------------------------------
# Shared
# ---------------------------------------------------------------------------


def residual_from_compensator(traj: SubjectTrajectory, comp: CompensatorPath) -> ResidualPath:
    """M = W - W_0 - A on the shared grid."""
    if comp.grid != traj.grid:
        raise GridMismatchError("compensator is not on the trajectory grid")
    if not traj.w.is_scalar:
        raise ValidationError("residuals support scalar treatments")
    w = traj.w.values
    return ResidualPath(traj.grid, w - w[0] - comp.values)
