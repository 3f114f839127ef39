"""Causal structural models: treatment-effect functionals per family.

Each family specifies the individual treatment effect of a deterministic plan
relative to the never-treat baseline, known up to a finite-dimensional causal
parameter. Evaluating an effect never reads counterfactual inputs: it depends
on the plan, the observed paths, and the parameter only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    GridMismatchError,
    UnsupportedParametrizationError,
    ValidationError,
)
from .paths import SampledPath, SubjectTrajectory, TimeGrid, Ensemble
from .simulate import TreatmentPlan

FAMILIES = ("discrete", "ou", "tte", "posint")


@dataclass(frozen=True)
class CausalParams:
    """Base for per-family causal parameters; subclasses define the vector form."""

    family = ""

    def to_vector(self) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def from_vector(cls, vec) -> "CausalParams":
        raise NotImplementedError

    @classmethod
    def in_domain(cls, vec) -> bool:
        """Whether a raw vector lies in the searchable parameter set."""
        raise NotImplementedError


@dataclass(frozen=True)
class DiscreteEffect(CausalParams):
    eta1: float
    family = "discrete"

    def to_vector(self):
        return np.array([self.eta1])

    @classmethod
    def from_vector(cls, vec):
        return cls(eta1=float(vec[0]))

    @classmethod
    def in_domain(cls, vec):
        return abs(float(vec[0])) <= 50.0


@dataclass(frozen=True)
class OuEffect(CausalParams):
    """Two-exponential cumulative-dose kernel: scale g1, mixture g2, decays g3 <= g4."""

    g1: float
    g2: float
    g3: float
    g4: float
    family = "ou"

    # Search bounds for the decay rates; the data horizon cannot identify
    # kernels far stiffer than the mesh resolves.
    G_MAX = 10.0

    def __post_init__(self):
        if not (self.g3 > 0 and self.g4 > 0):
            raise ValidationError("decay rates g3, g4 must be positive")
        if self.g3 > self.g4:
            raise ValidationError("ordering convention requires g3 <= g4")
        if not (0.0 <= self.g2 <= 1.0):
            raise ValidationError("mixture weight g2 must lie in [0, 1]")

    def to_vector(self):
        return np.array([self.g1, self.g2, self.g3, self.g4])

    @classmethod
    def from_vector(cls, vec):
        return cls(g1=float(vec[0]), g2=float(vec[1]), g3=float(vec[2]), g4=float(vec[3]))

    @classmethod
    def in_domain(cls, vec):
        g1, g2, g3, g4 = (float(v) for v in vec)
        return (
            abs(g1) <= 50.0
            and 0.0 <= g2 <= 1.0
            and 0.0 < g3 <= cls.G_MAX
            and 0.0 < g4 <= cls.G_MAX
            and g3 <= g4
        )


@dataclass(frozen=True)
class TteEffect(CausalParams):
    """Adverse-event threshold; the covariate volatility is an auxiliary quantity
    recoverable from realized quadratic variation and does not enter the effect."""

    alpha2: float
    alpha0: float | None = None
    family = "tte"

    def __post_init__(self):
        if not self.alpha2 > 0:
            raise ValidationError("alpha2 must be positive")

    def to_vector(self):
        return np.array([self.alpha2])

    @classmethod
    def from_vector(cls, vec):
        return cls(alpha2=float(vec[0]))

    @classmethod
    def in_domain(cls, vec):
        return 0.0 < float(vec[0]) <= 50.0


@dataclass(frozen=True)
class PosIntEffect(CausalParams):
    eta1: float
    family = "posint"

    def to_vector(self):
        return np.array([self.eta1])

    @classmethod
    def from_vector(cls, vec):
        return cls(eta1=float(vec[0]))

    @classmethod
    def in_domain(cls, vec):
        return abs(float(vec[0])) <= 50.0


PARAM_TYPES = {
    "discrete": DiscreteEffect,
    "ou": OuEffect,
    "tte": TteEffect,
    "posint": PosIntEffect,
}


def gamma_from_beta(beta) -> OuEffect:
    """Map the 3-d OU drift matrix to the two-exponential effect parameters.

    The effect kernel is the first component of exp(Bt(s-t)) b with
    Bt = [[beta11, beta13], [beta31, beta33]] and b = (-beta12, -beta32).
    Spectral projectors give the exponential weights directly, so a decoupled
    mode with no first-component loading simply contributes weight zero.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (3, 3):
        raise ValidationError("beta must be 3x3")
    a, bb = beta[0, 0], beta[0, 2]
    c, d = beta[2, 0], beta[2, 2]
    rhs = np.array([-beta[0, 1], -beta[2, 1]])
    half_tr = 0.5 * (a + d)
    disc = 0.25 * (a - d) ** 2 + bb * c
    if disc <= 1e-12 * max(1.0, half_tr**2):
        raise UnsupportedParametrizationError(
            "drift sub-matrix has complex or (near-)repeated eigenvalues; "
            "the two-exponential form does not apply"
        )
    root = math.sqrt(disc)
    lo, hi = half_tr - root, half_tr + root
    Bt = np.array([[a, bb], [c, d]])
    proj_lo = (Bt - hi * np.eye(2)) / (lo - hi)
    proj_hi = (Bt - lo * np.eye(2)) / (hi - lo)
    c_lo = float(proj_lo[0] @ rhs)
    c_hi = float(proj_hi[0] @ rhs)
    g1 = c_lo + c_hi
    if g1 == 0.0:
        raise UnsupportedParametrizationError("treatment has no first-order effect (g1 = 0)")
    g2 = c_lo / g1
    if lo <= 0:
        raise UnsupportedParametrizationError(
            f"drift sub-matrix eigenvalue {lo:.6g} is not positive"
        )
    if not 0.0 <= g2 <= 1.0:
        raise UnsupportedParametrizationError(
            f"exponential weights ({c_lo:.6g}, {c_hi:.6g}) are not a mixture of the scale"
        )
    return OuEffect(g1=g1, g2=g2, g3=lo, g4=hi)


# ---------------------------------------------------------------------------
# Effect evaluation
# ---------------------------------------------------------------------------


def _ou_kernel(grid: TimeGrid, gamma: OuEffect, j: int) -> np.ndarray:
    """Left-endpoint quadrature weights for the horizon grid.points[j]."""
    t = grid.points[j]
    tk = grid.points[:j]
    dts = np.diff(grid.points[: j + 1])
    return (
        gamma.g1
        * (gamma.g2 * np.exp(gamma.g3 * (tk - t)) + (1 - gamma.g2) * np.exp(gamma.g4 * (tk - t)))
        * dts
    )


def tau_ou(plan: TreatmentPlan, gamma: OuEffect, t: float) -> float:
    """Two-exponential cumulative effect of a plan evaluated with horizon t."""
    j = plan.grid.index_of(t)
    if j == 0:
        return 0.0
    return float(np.dot(plan.values[:j], _ou_kernel(plan.grid, gamma, j)))


def _ou_tau_path(values: np.ndarray, grid: TimeGrid, gamma: OuEffect) -> np.ndarray:
    """tau at every grid horizon; `values` is (L+1,) or (n, L+1)."""
    pts = grid.points
    dts = np.diff(pts)
    w_left = values[..., :-1]

    def mode(rate):
        incr = np.exp(rate * pts[:-1]) * w_left * dts
        cum = np.cumsum(incr, axis=-1)
        out = np.zeros_like(values)
        out[..., 1:] = np.exp(-rate * pts[1:]) * cum
        return out

    return gamma.g1 * (gamma.g2 * mode(gamma.g3) + (1 - gamma.g2) * mode(gamma.g4))


def _floor_grid_index(J: int, t: float, horizon: float) -> int:
    scaled = J * t / horizon
    # hitting a grid point exactly must not round down
    j = math.floor(scaled + 1e-9)
    return min(j, J)


def tau_discrete(plan: TreatmentPlan, eta1: float, t: float, J: int) -> float:
    """Cumulative-dose effect truncated to the last completed period before t."""
    horizon = plan.grid.horizon
    if not 0.0 <= t <= horizon * (1 + 1e-12):
        raise ValidationError(f"t={t} outside [0, {horizon}]")
    if plan.grid.steps != J:
        raise ValidationError(f"plan grid has {plan.grid.steps} steps, expected J={J}")
    j = _floor_grid_index(J, t, horizon)
    if j == 0:
        return 0.0
    dt = horizon / J
    return float(eta1 * np.sum(plan.values[:j]) * dt)


def tau_posint(plan: TreatmentPlan, eta1: float, t: float) -> float:
    """Linear cumulative-dose effect."""
    j = plan.grid.index_of(t)
    if j == 0:
        return 0.0
    return float(eta1 * np.dot(plan.values[:j], np.diff(plan.grid.points[: j + 1])))


def _cumdose_tau_path(values: np.ndarray, grid: TimeGrid, eta1: float) -> np.ndarray:
    dts = np.diff(grid.points)
    out = np.zeros_like(values)
    out[..., 1:] = eta1 * np.cumsum(values[..., :-1] * dts, axis=-1)
    return out


def hitting_index(values: np.ndarray, threshold: float) -> int | None:
    """First grid index where a path reaches the threshold, None if never."""
    hits = np.nonzero(values >= threshold)[0]
    return int(hits[0]) if hits.size else None


def tau_tte(plan: TreatmentPlan, z_path: SampledPath, alpha2: float, t: float) -> float:
    """Effect of the plan on the adverse-event indicator: minus the plan's left
    limit at the covariate's alpha2 crossing, if it happens by t."""
    if plan.grid != z_path.grid:
        raise GridMismatchError("plan and covariate path are on different grids")
    j = plan.grid.index_of(t)
    i2 = hitting_index(z_path.values, alpha2)
    if i2 is None or i2 > j:
        return 0.0
    return -float(plan.values[max(i2 - 1, 0)])


def _tte_tau_path(plan_values: np.ndarray, grid: TimeGrid, z_values: np.ndarray, alpha2: float) -> np.ndarray:
    out = np.zeros(len(grid))
    i2 = hitting_index(z_values, alpha2)
    if i2 is not None:
        out[i2:] = -plan_values[max(i2 - 1, 0)]
    return out


@dataclass(frozen=True)
class StructuralModel:
    """Family tag plus the closure data the effect needs.

    The tte family additionally reads the subject's observed covariate path at
    call time; all other families are functions of the plan and grid alone.
    """

    family: str
    grid: TimeGrid

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")

    @property
    def param_type(self):
        return PARAM_TYPES[self.family]

    def _check(self, gamma: CausalParams, plan: TreatmentPlan | None = None):
        if gamma.family != self.family:
            raise ValidationError(
                f"family mismatch: model is {self.family!r}, parameters are {gamma.family!r}"
            )
        if plan is not None and plan.grid != self.grid:
            raise GridMismatchError("plan is not on the model grid")

    def tau(
        self,
        plan: TreatmentPlan,
        gamma: CausalParams,
        t: float,
        traj: SubjectTrajectory | None = None,
    ) -> float:
        self._check(gamma, plan)
        if self.family == "ou":
            return tau_ou(plan, gamma, t)
        if self.family == "discrete":
            return tau_discrete(plan, gamma.eta1, t, self.grid.steps)
        if self.family == "posint":
            return tau_posint(plan, gamma.eta1, t)
        if traj is None:
            raise ValidationError("tte effects need the subject's observed covariate path")
        return tau_tte(plan, traj.z, gamma.alpha2, t)

    def tau_path_matrix(
        self, values: np.ndarray, gamma: CausalParams, Z: np.ndarray | None = None
    ) -> np.ndarray:
        """Effect at every grid horizon for stacked plans `values` (..., L+1)."""
        if self.family == "ou":
            return _ou_tau_path(values, self.grid, gamma)
        if self.family in ("discrete", "posint"):
            return _cumdose_tau_path(values, self.grid, gamma.eta1)
        if Z is None:
            raise ValidationError("tte effects need the observed covariate paths")
        values = np.atleast_2d(values)
        Z = np.atleast_2d(Z)
        if Z.shape[0] == 1 and values.shape[0] > 1:
            Z = np.broadcast_to(Z, values.shape)
        return np.stack(
            [
                _tte_tau_path(values[i], self.grid, Z[i], gamma.alpha2)
                for i in range(values.shape[0])
            ]
        )


def _scalar_w(traj: SubjectTrajectory) -> np.ndarray:
    if not traj.w.is_scalar:
        raise ValidationError("structural effects are defined for scalar treatments")
    return traj.w.values


def _scalar_z(traj: SubjectTrajectory) -> np.ndarray:
    return traj.z.values if traj.z.is_scalar else traj.z.values[:, 0]


def baseline_outcome(traj: SubjectTrajectory, model: StructuralModel, gamma: CausalParams) -> float:
    """Terminal baseline potential outcome: Y_T minus the effect of the observed
    treatment path taken as a plan."""
    model._check(gamma)
    if traj.grid != model.grid:
        raise GridMismatchError("trajectory is not on the model grid")
    plan = TreatmentPlan(SampledPath(model.grid, _scalar_w(traj)))
    horizon = model.grid.horizon
    return float(traj.y.values[-1]) - model.tau(plan, gamma, horizon, traj=traj)


def baseline_outcomes(ensemble: Ensemble, model: StructuralModel, gamma: CausalParams) -> np.ndarray:
    """Vector of terminal baseline outcomes across the ensemble."""
    model._check(gamma)
    if ensemble.grid != model.grid:
        raise GridMismatchError("ensemble is not on the model grid")
    if ensemble.q != 1:
        raise ValidationError("structural effects are defined for scalar treatments")
    W = ensemble.W[:, :, 0]
    Z = ensemble.Z[:, :, 0] if ensemble.n_covariates else None
    tau_T = model.tau_path_matrix(W, gamma, Z=Z)[:, -1]
    return ensemble.Y[:, -1] - tau_T


def _plan_terminal_effects(
    ensemble: Ensemble, model: StructuralModel, gamma: CausalParams, plan: TreatmentPlan
) -> np.ndarray:
    """tau_T(plan) per subject (constant across subjects except for tte)."""
    if model.family == "tte":
        Z = ensemble.Z[:, :, 0]
        plans = np.broadcast_to(plan.values, Z.shape)
        return model.tau_path_matrix(plans, gamma, Z=Z)[:, -1]
    value = model.tau(plan, gamma, model.grid.horizon)
    return np.full(ensemble.n, value)


def counterfactual_mean_estimate(
    ensemble: Ensemble, model: StructuralModel, gamma: CausalParams, plan: TreatmentPlan
) -> float:
    """Plug-in sample mean of the counterfactual terminal outcome under a plan."""
    if plan.grid != ensemble.grid:
        raise GridMismatchError("plan is not on the ensemble grid")
    y0 = baseline_outcomes(ensemble, model, gamma)
    return float(np.mean(y0 + _plan_terminal_effects(ensemble, model, gamma, plan)))


def counterfactual_path_estimate(
    traj: SubjectTrajectory, model: StructuralModel, gamma: CausalParams, plan: TreatmentPlan
) -> SampledPath:
    """Estimated potential-outcome path: observed Y with the observed-treatment
    effect swapped for the plan effect at every horizon."""
    if plan.grid != traj.grid:
        raise GridMismatchError("plan is not on the trajectory grid")
    model._check(gamma)
    z = _scalar_z(traj)[None, :]
    tau_obs = model.tau_path_matrix(_scalar_w(traj)[None, :], gamma, Z=z)[0]
    tau_plan = model.tau_path_matrix(plan.values[None, :], gamma, Z=z)[0]
    return SampledPath(traj.grid, traj.y.values - tau_obs + tau_plan)


def stochastic_intervention_mean(
    ensemble: Ensemble,
    model: StructuralModel,
    gamma: CausalParams,
    plans: Sequence[tuple[TreatmentPlan, float]],
) -> float:
    """Mixture of counterfactual means over finitely many weighted plans."""
    if not plans:
        raise ValidationError("need at least one (plan, weight) pair")
    weights = np.array([w for _, w in plans], dtype=float)
    if np.any(weights < 0):
        raise ValidationError("plan weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValidationError(f"plan weights must sum to 1, got {weights.sum()!r}")
    return float(
        sum(
            w * counterfactual_mean_estimate(ensemble, model, gamma, plan)
            for (plan, _), w in zip(plans, weights)
        )
    )


def plan_from_spec(spec: str, grid: TimeGrid) -> TreatmentPlan:
    """Parse a CLI plan spec: ``const:<v>`` or ``csv:<file>`` (W column)."""
    from .paths import read_ensemble  # local import to avoid cycle at module load

    kind, _, arg = spec.partition(":")
    if kind == "const":
        try:
            return TreatmentPlan.constant(grid, float(arg))
        except ValueError:
            raise ValidationError(f"bad constant plan value {arg!r}") from None
    if kind == "csv":
        with open(arg, "r", encoding="utf-8") as fh:
            source = read_ensemble(fh)
        if source.n != 1:
            raise ValidationError(f"plan file {arg!r} must contain exactly one subject")
        if source.grid != grid:
            raise GridMismatchError("plan file grid does not match the data grid")
        return TreatmentPlan(SampledPath(grid, source.W[0, :, 0]))
    raise ValidationError(f"unknown plan spec {spec!r}; use const:<v> or csv:<file>")
