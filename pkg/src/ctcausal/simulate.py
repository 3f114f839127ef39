"""Seeded generation of factual and counterfactual ensembles.

Four families are supported: a 3-dimensional Ornstein-Uhlenbeck system with a
continuously valued treatment, a discrete-time linear feedback mechanism
embedded as step functions, a time-to-event pair driven by a covariate
crossing thresholds, and a cumulative treatment with strictly positive jump
intensity.

Subject ``i`` always consumes an RNG stream derived from ``(seed, offset+i)``,
so output is bit-identical for any worker count or batch split, and a
counterfactual run with the same seed shares the factual run's noise
(feeding a subject's factual treatment back as the plan reproduces that
subject's factual outcome and covariate paths exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import GridMismatchError, ValidationError
from .paths import Ensemble, EnsembleMeta, SampledPath, TimeGrid, make_uniform_grid
from .runtime import run_chunked

PAPER_BETA = np.array([[1.0, -0.5, 0.2], [-0.7, 1.0, -0.6], [0.3, 0.2, 1.0]])
PAPER_SIGMA = np.array([[0.1, 0.0], [0.0, 0.1], [0.1, 0.0]])

# Structurally zero diffusion entries: treatment and outcome/covariate noise
# sources are disjoint.
_SIGMA_ZEROS = ((0, 1), (1, 0), (2, 1))


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tolerates point-mass (singular) covariances."""
    vals, vecs = np.linalg.eigh(cov)
    if np.any(vals < -1e-10):
        raise ValidationError("init_cov must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class OuConfig:
    """3-d OU dynamics for state (Y, W, Z): dX = -beta X dt + sigma dB."""

    beta: np.ndarray = field(default_factory=lambda: PAPER_BETA.copy())
    sigma: np.ndarray = field(default_factory=lambda: PAPER_SIGMA.copy())
    init_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    init_cov: np.ndarray = field(default_factory=lambda: np.eye(3))
    horizon: float = 1.0
    steps: int = 200

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        mean = np.asarray(self.init_mean, dtype=float)
        cov = np.asarray(self.init_cov, dtype=float)
        if beta.shape != (3, 3):
            raise ValidationError("beta must be 3x3")
        if sigma.shape != (3, 2):
            raise ValidationError("sigma must be 3x2")
        for i, j in _SIGMA_ZEROS:
            if sigma[i, j] != 0.0:
                raise ValidationError(
                    f"sigma[{i + 1},{j + 1}] must be 0: treatment and outcome share no noise source"
                )
        if mean.shape != (3,) or cov.shape != (3, 3):
            raise ValidationError("init_mean must be length 3 and init_cov 3x3")
        if not np.allclose(cov, cov.T):
            raise ValidationError("init_cov must be symmetric")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if not self.steps >= 1:
            raise ValidationError("steps must be >= 1")
        for name, a in (("beta", beta), ("sigma", sigma), ("init_mean", mean), ("init_cov", cov)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.horizon, self.steps)


def paper_ou_config(steps: int = 200) -> OuConfig:
    """The simulation-study configuration: beta*, sigma*, MVN(0, I) start on [0, 1]."""
    return OuConfig(steps=steps)


@dataclass(frozen=True)
class DiscreteConfig:
    """Linear discrete-time mechanism with treatment-confounder feedback.

    Z'_k = ar_z Z'_{k-1} + zeta_k
    W'_k = lw W'_{k-1} + ly Y'_{k-1} + lz Z'_{k-1} + u_k
    Y'_k = eta0 + eta1 (T/J) sum_{i<k} W'_i + Z'_{k-1} + eps_k

    with independent centered normal noises; at k = 0 the lag terms are absent.
    """

    J: int = 10
    eta0: float = 0.0
    eta1: float = 1.5
    ar_z: float = 0.8
    load_w: tuple[float, float, float] = (0.5, 0.2, 0.3)  # (lag W, lag Y, lag Z)
    sd_z: float = 0.5
    sd_w: float = 0.5
    sd_y: float = 0.5
    horizon: float = 1.0

    def __post_init__(self):
        if not self.J >= 1:
            raise ValidationError("J must be >= 1")
        if min(self.sd_z, self.sd_w, self.sd_y) < 0:
            raise ValidationError("noise standard deviations must be nonnegative")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if len(self.load_w) != 3:
            raise ValidationError("load_w must be (lag-W, lag-Y, lag-Z)")

    @property
    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.horizon, self.J)


@dataclass(frozen=True)
class TteConfig:
    """Time-to-event treatment and outcome driven by a Brownian covariate.

    Z = alpha0 B; treatment seeking starts when Z reaches alpha1 and the
    treatment starts at the next unit-rate Poisson event; the adverse event
    fires when Z reaches alpha2 unless the treatment is already active.
    """

    alpha0: float = 1.0
    alpha1: float = 0.5
    alpha2: float = 1.0
    horizon: float = 1.0
    steps: int = 200

    def __post_init__(self):
        if not (0 < self.alpha1 < self.alpha2):
            raise ValidationError("need 0 < alpha1 < alpha2")
        if not self.alpha0 > 0:
            raise ValidationError("alpha0 must be positive")
        if not self.horizon > 0 or not self.steps >= 1:
            raise ValidationError("horizon must be positive and steps >= 1")

    @property
    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.horizon, self.steps)


@dataclass(frozen=True)
class PosIntConfig:
    """Cumulative treatment with strictly positive jump rate.

    dW_t = lam exp(clamp(Z_{t-} + Y_{t-})) dN_t with N a unit-rate Poisson
    process, Z a standard Brownian path, and outcome closure
    Y_t = eta1 * integral of W over [0, t] + Z_t.
    """

    lam: float = 0.5
    eta1: float = 0.8
    clamp_lo: float = -3.0
    clamp_hi: float = 3.0
    horizon: float = 1.0
    steps: int = 200

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lam must be positive")
        if not self.clamp_lo < self.clamp_hi:
            raise ValidationError("need clamp_lo < clamp_hi")
        if not self.horizon > 0 or not self.steps >= 1:
            raise ValidationError("horizon must be positive and steps >= 1")

    @property
    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.horizon, self.steps)


AnyConfig = OuConfig | DiscreteConfig | TteConfig | PosIntConfig

_FAMILY_BY_CONFIG = {
    OuConfig: "ou",
    DiscreteConfig: "discrete",
    TteConfig: "tte",
    PosIntConfig: "posint",
}


def family_of(config: AnyConfig) -> str:
    for cls, name in _FAMILY_BY_CONFIG.items():
        if isinstance(config, cls):
            return name
    raise ValidationError(f"unknown config type {type(config).__name__}")


@dataclass(frozen=True)
class TreatmentPlan:
    """Deterministic treatment trajectory on the simulation grid."""

    path: SampledPath

    def __post_init__(self):
        if not self.path.is_scalar:
            raise ValidationError("treatment plans are scalar paths")

    @property
    def grid(self) -> TimeGrid:
        return self.path.grid

    @property
    def values(self) -> np.ndarray:
        return self.path.values

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> "TreatmentPlan":
        return cls(SampledPath(grid, np.full(len(grid), float(value))))

    @classmethod
    def from_values(cls, grid: TimeGrid, values) -> "TreatmentPlan":
        return cls(SampledPath(grid, np.asarray(values, dtype=float)))


def _check_plan(plan: TreatmentPlan, grid: TimeGrid) -> None:
    if plan.grid != grid:
        raise GridMismatchError("treatment plan is not on the simulation grid")


def _ensemble(grid, W, Y, Z, seed, dgp) -> Ensemble:
    return Ensemble(
        grid=grid,
        W=W[:, :, None],
        Y=Y,
        Z=Z[:, :, None],
        meta=EnsembleMeta(seed=seed, dgp=dgp),
    )


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck family
# ---------------------------------------------------------------------------


def _ou_noise(config: OuConfig, seed: int, start: int, stop: int, offset: int):
    L = config.steps
    m = stop - start
    eps0 = np.empty((m, 3))
    dB = np.empty((m, L, 2))
    for i in range(m):
        rng = _subject_rng(seed, offset + start + i)
        eps0[i] = rng.standard_normal(3)
        dB[i] = rng.standard_normal((L, 2))
    return eps0, dB * math.sqrt(config.horizon / L)


def _ou_init(config: OuConfig, eps0: np.ndarray):
    F = _cov_factor(config.init_cov)
    mean = config.init_mean
    # Elementwise expansion keeps results independent of chunk shape.
    y0 = mean[0] + F[0, 0] * eps0[:, 0] + F[0, 1] * eps0[:, 1] + F[0, 2] * eps0[:, 2]
    w0 = mean[1] + F[1, 0] * eps0[:, 0] + F[1, 1] * eps0[:, 1] + F[1, 2] * eps0[:, 2]
    z0 = mean[2] + F[2, 0] * eps0[:, 0] + F[2, 1] * eps0[:, 1] + F[2, 2] * eps0[:, 2]
    return y0, w0, z0


def simulate_ou(
    config: OuConfig, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Euler scheme for the confounded (Y, W, Z) system."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    L = config.steps
    dt = config.horizon / L
    b = config.beta
    s = config.sigma

    def block(start, stop):
        eps0, dB = _ou_noise(config, seed, start, stop, subject_offset)
        m = stop - start
        Y = np.empty((m, L + 1))
        W = np.empty((m, L + 1))
        Z = np.empty((m, L + 1))
        Y[:, 0], W[:, 0], Z[:, 0] = _ou_init(config, eps0)
        for k in range(L):
            yk, wk, zk = Y[:, k], W[:, k], Z[:, k]
            Y[:, k + 1] = yk - (b[0, 0] * yk + b[0, 1] * wk + b[0, 2] * zk) * dt + s[0, 0] * dB[:, k, 0]
            W[:, k + 1] = wk - (b[1, 0] * yk + b[1, 1] * wk + b[1, 2] * zk) * dt + s[1, 1] * dB[:, k, 1]
            Z[:, k + 1] = zk - (b[2, 0] * yk + b[2, 1] * wk + b[2, 2] * zk) * dt + s[2, 0] * dB[:, k, 0]
        return Y, W, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    W = np.concatenate([p[1] for p in parts])
    Z = np.concatenate([p[2] for p in parts])
    return _ensemble(grid, W, Y, Z, seed, "ou")


def simulate_ou_counterfactual(
    config: OuConfig, plan: TreatmentPlan, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Potential-outcome system under a deterministic plan, coupled to the
    factual run: the same per-subject stream supplies the initial state and
    the outcome-side Brownian increments."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    _check_plan(plan, grid)
    L = config.steps
    dt = config.horizon / L
    b = config.beta
    s = config.sigma
    w_plan = plan.values

    def block(start, stop):
        eps0, dB = _ou_noise(config, seed, start, stop, subject_offset)
        m = stop - start
        Y = np.empty((m, L + 1))
        Z = np.empty((m, L + 1))
        y0, _, z0 = _ou_init(config, eps0)
        Y[:, 0], Z[:, 0] = y0, z0
        for k in range(L):
            yk, zk = Y[:, k], Z[:, k]
            wk = w_plan[k]
            Y[:, k + 1] = yk - (b[0, 0] * yk + b[0, 1] * wk + b[0, 2] * zk) * dt + s[0, 0] * dB[:, k, 0]
            Z[:, k + 1] = zk - (b[2, 0] * yk + b[2, 1] * wk + b[2, 2] * zk) * dt + s[2, 0] * dB[:, k, 0]
        return Y, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    Z = np.concatenate([p[1] for p in parts])
    W = np.tile(w_plan, (n, 1))
    return _ensemble(grid, W, Y, Z, seed, "ou-counterfactual")


# ---------------------------------------------------------------------------
# Discrete-time family
# ---------------------------------------------------------------------------


def _discrete_noise(config: DiscreteConfig, seed, start, stop, offset):
    J = config.J
    m = stop - start
    zeta = np.empty((m, J + 1))
    u = np.empty((m, J + 1))
    eps = np.empty((m, J + 1))
    for i in range(m):
        rng = _subject_rng(seed, offset + start + i)
        zeta[i] = rng.standard_normal(J + 1)
        u[i] = rng.standard_normal(J + 1)
        eps[i] = rng.standard_normal(J + 1)
    return config.sd_z * zeta, config.sd_w * u, config.sd_y * eps


def _discrete_outcome(config: DiscreteConfig, W, Z, eps):
    """Structural outcome recursion given a treatment matrix (factual or plan)."""
    J = config.J
    dt = config.horizon / J
    Y = np.empty_like(W)
    Y[:, 0] = config.eta0 + eps[:, 0]
    cum = np.zeros(W.shape[0])
    for k in range(1, J + 1):
        cum = cum + W[:, k - 1]
        Y[:, k] = config.eta0 + config.eta1 * dt * cum + Z[:, k - 1] + eps[:, k]
    return Y


def simulate_discrete(
    config: DiscreteConfig, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Step-function paths of the linear feedback mechanism on the J-step grid."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    J = config.J
    lw, ly, lz = config.load_w

    def block(start, stop):
        zeta, u, eps = _discrete_noise(config, seed, start, stop, subject_offset)
        m = stop - start
        Z = np.empty((m, J + 1))
        W = np.empty((m, J + 1))
        Z[:, 0] = zeta[:, 0]
        W[:, 0] = u[:, 0]
        Ylag = config.eta0 + eps[:, 0]  # Y'_0
        dt = config.horizon / J
        cum = np.zeros(m)
        Y = np.empty((m, J + 1))
        Y[:, 0] = Ylag
        for k in range(1, J + 1):
            Z[:, k] = config.ar_z * Z[:, k - 1] + zeta[:, k]
            W[:, k] = lw * W[:, k - 1] + ly * Y[:, k - 1] + lz * Z[:, k - 1] + u[:, k]
            cum = cum + W[:, k - 1]
            Y[:, k] = config.eta0 + config.eta1 * dt * cum + Z[:, k - 1] + eps[:, k]
        return Y, W, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    W = np.concatenate([p[1] for p in parts])
    Z = np.concatenate([p[2] for p in parts])
    return _ensemble(grid, W, Y, Z, seed, "discrete")


def simulate_discrete_counterfactual(
    config: DiscreteConfig, plan: TreatmentPlan, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Counterfactual outcome under a plan, with the factual noise streams."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    _check_plan(plan, grid)
    J = config.J

    def block(start, stop):
        zeta, _, eps = _discrete_noise(config, seed, start, stop, subject_offset)
        m = stop - start
        Z = np.empty((m, J + 1))
        Z[:, 0] = zeta[:, 0]
        for k in range(1, J + 1):
            Z[:, k] = config.ar_z * Z[:, k - 1] + zeta[:, k]
        Wp = np.tile(plan.values, (m, 1))
        Y = _discrete_outcome(config, Wp, Z, eps)
        return Y, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    Z = np.concatenate([p[1] for p in parts])
    W = np.tile(plan.values, (n, 1))
    return _ensemble(grid, W, Y, Z, seed, "discrete-counterfactual")


# ---------------------------------------------------------------------------
# Time-to-event family
# ---------------------------------------------------------------------------


def _poisson_event_times(rng: np.random.Generator, horizon: float) -> list[float]:
    times = []
    t = rng.exponential()
    while t <= horizon:
        times.append(t)
        t += rng.exponential()
    return times


def _first_hit_index(z_row: np.ndarray, threshold: float) -> int | None:
    hits = np.nonzero(z_row >= threshold)[0]
    return int(hits[0]) if hits.size else None


def _ceil_grid_index(points: np.ndarray, t: float) -> int:
    return int(np.searchsorted(points, t, side="left"))


def simulate_tte(config: TteConfig, n: int, seed: int, subject_offset: int = 0) -> Ensemble:
    """Time-to-event treatment/outcome pair with at most one jump each."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    points = grid.points
    L = config.steps
    sq_dt = math.sqrt(config.horizon / L)

    def block(start, stop):
        m = stop - start
        Z = np.empty((m, L + 1))
        W = np.zeros((m, L + 1))
        Y = np.zeros((m, L + 1))
        for i in range(m):
            rng = _subject_rng(seed, subject_offset + start + i)
            incr = config.alpha0 * sq_dt * rng.standard_normal(L)
            Z[i, 0] = 0.0
            Z[i, 1:] = np.cumsum(incr)
            events = _poisson_event_times(rng, config.horizon)
            i1 = _first_hit_index(Z[i], config.alpha1)
            i2 = _first_hit_index(Z[i], config.alpha2)
            w_jump = None
            if i1 is not None:
                t1 = points[i1]
                for s in events:
                    if s >= t1:
                        k = _ceil_grid_index(points, s)
                        if k <= L:
                            w_jump = k
                        break
            if w_jump is not None:
                W[i, w_jump:] = 1.0
            if i2 is not None and not (w_jump is not None and w_jump < i2):
                Y[i, i2:] = 1.0
        return Y, W, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    W = np.concatenate([p[1] for p in parts])
    Z = np.concatenate([p[2] for p in parts])
    return _ensemble(grid, W, Y, Z, seed, "tte")


def simulate_tte_counterfactual(
    config: TteConfig, plan: TreatmentPlan, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Counterfactual adverse-event path under a plan; the covariate is unaffected."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    _check_plan(plan, grid)
    L = config.steps
    sq_dt = math.sqrt(config.horizon / L)
    w_left = np.concatenate([plan.values[:1], plan.values[:-1]])

    def block(start, stop):
        m = stop - start
        Z = np.empty((m, L + 1))
        Y = np.zeros((m, L + 1))
        for i in range(m):
            rng = _subject_rng(seed, subject_offset + start + i)
            incr = config.alpha0 * sq_dt * rng.standard_normal(L)
            Z[i, 0] = 0.0
            Z[i, 1:] = np.cumsum(incr)
            i2 = _first_hit_index(Z[i], config.alpha2)
            if i2 is not None and w_left[i2] == 0.0:
                Y[i, i2:] = 1.0
        return Y, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    Z = np.concatenate([p[1] for p in parts])
    W = np.tile(plan.values, (n, 1))
    return _ensemble(grid, W, Y, Z, seed, "tte-counterfactual")


# ---------------------------------------------------------------------------
# Positive-intensity family
# ---------------------------------------------------------------------------


def _posint_event_counts(config: PosIntConfig, rng, points) -> np.ndarray:
    counts = np.zeros(config.steps, dtype=float)
    for s in _poisson_event_times(rng, config.horizon):
        k = _ceil_grid_index(points, s)
        if 1 <= k <= config.steps:
            counts[k - 1] += 1.0
    return counts


def simulate_posint(
    config: PosIntConfig, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Cumulative-dose treatment with positive jump rate and additive outcome."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    points = grid.points
    L = config.steps
    dt = config.horizon / L
    sq_dt = math.sqrt(dt)

    def block(start, stop):
        m = stop - start
        Z = np.empty((m, L + 1))
        dN = np.empty((m, L))
        for i in range(m):
            rng = _subject_rng(seed, subject_offset + start + i)
            incr = sq_dt * rng.standard_normal(L)
            Z[i, 0] = 0.0
            Z[i, 1:] = np.cumsum(incr)
            dN[i] = _posint_event_counts(config, rng, points)
        W = np.zeros((m, L + 1))
        Y = np.zeros((m, L + 1))
        Y[:, 0] = Z[:, 0]
        cum = np.zeros(m)
        for k in range(1, L + 1):
            rate = config.lam * np.exp(
                np.clip(Z[:, k - 1] + Y[:, k - 1], config.clamp_lo, config.clamp_hi)
            )
            W[:, k] = W[:, k - 1] + rate * dN[:, k - 1]
            cum = cum + W[:, k - 1] * dt
            Y[:, k] = config.eta1 * cum + Z[:, k]
        return Y, W, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    W = np.concatenate([p[1] for p in parts])
    Z = np.concatenate([p[2] for p in parts])
    return _ensemble(grid, W, Y, Z, seed, "posint")


def simulate_posint_counterfactual(
    config: PosIntConfig, plan: TreatmentPlan, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Counterfactual outcome Y = eta1 * cumulative plan dose + Z."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    grid = config.grid
    _check_plan(plan, grid)
    L = config.steps
    dt = config.horizon / L
    sq_dt = math.sqrt(dt)
    cum_plan = np.concatenate([[0.0], np.cumsum(plan.values[:-1] * dt)])

    def block(start, stop):
        m = stop - start
        Z = np.empty((m, L + 1))
        for i in range(m):
            rng = _subject_rng(seed, subject_offset + start + i)
            incr = sq_dt * rng.standard_normal(L)
            Z[i, 0] = 0.0
            Z[i, 1:] = np.cumsum(incr)
        Y = config.eta1 * cum_plan[None, :] + Z
        return Y, Z

    parts = run_chunked(block, n)
    Y = np.concatenate([p[0] for p in parts])
    Z = np.concatenate([p[1] for p in parts])
    W = np.tile(plan.values, (n, 1))
    return _ensemble(grid, W, Y, Z, seed, "posint-counterfactual")


# ---------------------------------------------------------------------------
# Dispatch and Monte Carlo ground truth
# ---------------------------------------------------------------------------

_SIMULATORS = {
    "ou": simulate_ou,
    "discrete": simulate_discrete,
    "tte": simulate_tte,
    "posint": simulate_posint,
}

_COUNTERFACTUAL_SIMULATORS = {
    "ou": simulate_ou_counterfactual,
    "discrete": simulate_discrete_counterfactual,
    "tte": simulate_tte_counterfactual,
    "posint": simulate_posint_counterfactual,
}


def simulate(config: AnyConfig, n: int, seed: int, subject_offset: int = 0) -> Ensemble:
    """Family-dispatching factual simulator."""
    return _SIMULATORS[family_of(config)](config, n, seed, subject_offset=subject_offset)


def simulate_counterfactual(
    config: AnyConfig, plan: TreatmentPlan, n: int, seed: int, subject_offset: int = 0
) -> Ensemble:
    """Family-dispatching counterfactual simulator (noise-coupled to `simulate`)."""
    return _COUNTERFACTUAL_SIMULATORS[family_of(config)](
        config, plan, n, seed, subject_offset=subject_offset
    )


class McEstimate(NamedTuple):
    mean: float
    se: float
    n: int


_TRUTH_BATCH = 20_000


def true_counterfactual_mean(
    config: AnyConfig, plan: TreatmentPlan, n_mc: int, seed: int
) -> McEstimate:
    """Monte Carlo mean and standard error of the terminal counterfactual outcome.

    Batched internally with subject-offset streams, so the estimate is
    identical to one giant counterfactual simulation with the same seed.
    """
    if n_mc < 2:
        raise ValidationError("n_mc must be >= 2")
    terminal = np.empty(n_mc)
    start = 0
    while start < n_mc:
        stop = min(start + _TRUTH_BATCH, n_mc)
        batch = simulate_counterfactual(
            config, plan, stop - start, seed, subject_offset=start
        )
        terminal[start:stop] = batch.Y[:, -1]
        start = stop
    mean = float(np.mean(terminal))
    se = float(np.std(terminal, ddof=1) / math.sqrt(n_mc))
    return McEstimate(mean=mean, se=se, n=n_mc)


# ---------------------------------------------------------------------------
# Flat key=value configuration files
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "dgp": str,
    "T": float,
    "steps": int,
    "n": int,
    "seed": int,
    "J": int,
    "eta0": float,
    "eta1": float,
    "alpha0": float,
    "alpha1": float,
    "alpha2": float,
    "lambda": float,
    "clamp_lo": float,
    "clamp_hi": float,
}

_VECTOR_KEYS = {
    "beta": 9,
    "sigma": 6,
    "init_mean": 3,
    "init_cov": 9,
}

_RUN_KEYS = {"n", "seed", "steps"}


def parse_config_text(text: str) -> dict:
    """Parse flat key=value lines; unknown or duplicate keys are errors."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        if key in _SCALAR_KEYS:
            caster = _SCALAR_KEYS[key]
            try:
                out[key] = caster(value)
            except ValueError:
                raise ValidationError(
                    f"config line {lineno}: cannot parse {key}={value!r}"
                ) from None
        elif key in _VECTOR_KEYS:
            parts = [p for p in value.replace(",", " ").split() if p]
            if len(parts) != _VECTOR_KEYS[key]:
                raise ValidationError(
                    f"config line {lineno}: {key} needs {_VECTOR_KEYS[key]} values"
                )
            try:
                out[key] = np.asarray([float(p) for p in parts])
            except ValueError:
                raise ValidationError(
                    f"config line {lineno}: cannot parse {key}={value!r}"
                ) from None
        else:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
    return out


def _take(raw: dict, mapping: dict) -> dict:
    kwargs = {}
    for key, target in mapping.items():
        if key in raw:
            kwargs[target] = raw[key]
    return kwargs


def config_from_mapping(raw: dict, dgp: str | None = None) -> AnyConfig:
    """Build a family config from a parsed key=value mapping."""
    file_dgp = raw.get("dgp")
    if dgp is None:
        dgp = file_dgp
    elif file_dgp is not None and file_dgp != dgp:
        raise ValidationError(f"config dgp={file_dgp!r} conflicts with requested {dgp!r}")
    if dgp is None:
        raise ValidationError("no dgp specified (flag or config key)")
    stray = set(raw) - _allowed_keys(dgp) - _RUN_KEYS - {"dgp"}
    if stray:
        raise ValidationError(f"keys {sorted(stray)} are not valid for dgp={dgp!r}")
    if dgp == "ou":
        kwargs = _take(raw, {"T": "horizon", "steps": "steps"})
        if "beta" in raw:
            kwargs["beta"] = raw["beta"].reshape(3, 3)
        if "sigma" in raw:
            kwargs["sigma"] = raw["sigma"].reshape(3, 2)
        if "init_mean" in raw:
            kwargs["init_mean"] = raw["init_mean"]
        if "init_cov" in raw:
            kwargs["init_cov"] = raw["init_cov"].reshape(3, 3)
        return OuConfig(**kwargs)
    if dgp == "discrete":
        return DiscreteConfig(**_take(raw, {"T": "horizon", "J": "J", "eta0": "eta0", "eta1": "eta1"}))
    if dgp == "tte":
        return TteConfig(
            **_take(
                raw,
                {"T": "horizon", "steps": "steps", "alpha0": "alpha0", "alpha1": "alpha1", "alpha2": "alpha2"},
            )
        )
    if dgp == "posint":
        return PosIntConfig(
            **_take(
                raw,
                {
                    "T": "horizon",
                    "steps": "steps",
                    "lambda": "lam",
                    "eta1": "eta1",
                    "clamp_lo": "clamp_lo",
                    "clamp_hi": "clamp_hi",
                },
            )
        )
    raise ValidationError(f"unknown dgp {dgp!r}")


def _allowed_keys(dgp: str) -> set:
    common = {"T"}
    per_dgp = {
        "ou": {"steps", "beta", "sigma", "init_mean", "init_cov"},
        "discrete": {"J", "eta0", "eta1"},
        "tte": {"steps", "alpha0", "alpha1", "alpha2"},
        "posint": {"steps", "lambda", "eta1", "clamp_lo", "clamp_hi"},
    }
    if dgp not in per_dgp:
        raise ValidationError(f"unknown dgp {dgp!r}")
    return common | per_dgp[dgp]
