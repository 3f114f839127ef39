"""Empirical moment machinery for the identification strategies.

Orthogonalization moments integrate baseline-outcome integrands against the
estimated treatment residual; weighting moments integrate the centered
integrands against the raw treatment, reweighted by the inverse jump rate.
Both are zero-mean at the true causal parameter, which is what the criterion
minimizes and what the diagnostic checks exploit.

The weighting route additionally assumes the local integrability of the
reweighted integrands; this is not checkable from data and is taken as given
for the supported families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GridMismatchError, PositivityError, ValidationError
from .paths import Ensemble, SampledPath
from .structural import CausalParams, StructuralModel, baseline_outcomes

_RATE_FLOOR = 1e-8
_MAX_ZPOW = 3


@dataclass(frozen=True)
class HSpec:
    """A finite list of integrand descriptors, each of the form
    (path factor at t-) x (terminal baseline outcome)."""

    descriptors: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.descriptors:
            raise ValidationError("HSpec needs at least one descriptor")
        for kind, arg in self.descriptors:
            if kind not in ("base", "zw", "ww", "yw", "zpow"):
                raise ValidationError(f"unknown integrand descriptor {kind!r}")
            if kind == "zpow" and not 1 <= arg <= _MAX_ZPOW:
                raise ValidationError(f"zpow exponent must be in 1..{_MAX_ZPOW}")
            if kind == "zw" and arg < 1:
                raise ValidationError("zw component index is 1-based")

    @property
    def d(self) -> int:
        return len(self.descriptors)

    @classmethod
    def parse(cls, text: str) -> "HSpec":
        """Parse a comma list like ``base,zw:1,ww,yw`` or ``zpow:1..3``."""
        descriptors: list[tuple[str, int]] = []
        for token in (t.strip() for t in text.split(",")):
            if not token:
                continue
            kind, _, arg = token.partition(":")
            if kind in ("base", "ww", "yw"):
                if arg:
                    raise ValidationError(f"descriptor {kind!r} takes no argument")
                descriptors.append((kind, 0))
            elif kind in ("zw", "zpow"):
                if ".." in arg:
                    lo, _, hi = arg.partition("..")
                    try:
                        rng = range(int(lo), int(hi) + 1)
                    except ValueError:
                        raise ValidationError(f"bad range in descriptor {token!r}") from None
                    descriptors.extend((kind, i) for i in rng)
                else:
                    try:
                        descriptors.append((kind, int(arg)))
                    except ValueError:
                        raise ValidationError(f"bad argument in descriptor {token!r}") from None
            else:
                raise ValidationError(f"unknown integrand descriptor {token!r}")
        return cls(tuple(descriptors))

    def format(self) -> str:
        parts = []
        for kind, arg in self.descriptors:
            parts.append(kind if kind in ("base", "ww", "yw") else f"{kind}:{arg}")
        return ",".join(parts)

    def factor_matrix(self, ensemble: Ensemble) -> np.ndarray:
        """Path factors (d, n, L+1); the full integrand is factor x Y0_T."""
        n, L1 = ensemble.Y.shape
        out = np.empty((self.d, n, L1))
        for row, (kind, arg) in enumerate(self.descriptors):
            if kind == "base":
                out[row] = 1.0
            elif kind == "ww":
                out[row] = ensemble.W[:, :, 0]
            elif kind == "yw":
                out[row] = ensemble.Y
            elif kind == "zw":
                if arg > ensemble.n_covariates:
                    raise ValidationError(
                        f"descriptor zw:{arg} but ensemble has {ensemble.n_covariates} covariates"
                    )
                out[row] = ensemble.Z[:, :, arg - 1]
            else:  # zpow
                if ensemble.n_covariates < 1:
                    raise ValidationError("zpow descriptors need a covariate")
                out[row] = ensemble.Z[:, :, 0] ** arg
        return out


PAPER_HSPEC = HSpec.parse("base,zw:1,ww,yw")


def stack_residuals(ensemble: Ensemble, residuals: Sequence[SampledPath]) -> np.ndarray:
    """Validate alignment with the ensemble and stack to (n, L+1)."""
    if len(residuals) != ensemble.n:
        raise ValidationError(
            f"{len(residuals)} residual paths for {ensemble.n} subjects"
        )
    for i, path in enumerate(residuals):
        if path.grid != ensemble.grid:
            raise GridMismatchError(f"residual for subject {i} is on a different grid")
        if not path.is_scalar:
            raise ValidationError("residual paths must be scalar")
    return np.stack([p.values for p in residuals])


def _check_scalar_treatment(ensemble: Ensemble) -> None:
    if ensemble.q != 1:
        raise ValidationError("moment machinery supports scalar treatments")


def _subject_ito_sums(F: np.ndarray, dX: np.ndarray, j: int) -> np.ndarray:
    """Per-subject Ito sums up to grid index j: (d, n)."""
    if j == 0:
        return np.zeros(F.shape[:2])
    return np.einsum("dnk,nk->dn", F[:, :, :j], dX[:, :j])


def mu_hat(
    ensemble: Ensemble,
    residuals: Sequence[SampledPath],
    hspec: HSpec,
    model: StructuralModel,
    gamma: CausalParams,
    t: float,
) -> np.ndarray:
    """Empirical orthogonalization moments: the (d, q) matrix of sample means
    of the integrand Ito sums against the residual up to time t."""
    _check_scalar_treatment(ensemble)
    M = stack_residuals(ensemble, residuals)
    j = ensemble.grid.index_of(t)
    y0 = baseline_outcomes(ensemble, model, gamma)
    F = hspec.factor_matrix(ensemble)
    S = _subject_ito_sums(F, np.diff(M, axis=1), j)
    return np.mean(S * y0, axis=1)[:, None]


def moment_standard_errors(S: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """Monte Carlo standard errors of the per-descriptor moment means."""
    n = y0.size
    contrib = S * y0
    if n < 2:
        return np.full((S.shape[0], 1), math.nan)
    return (np.std(contrib, axis=1, ddof=1) / math.sqrt(n))[:, None]


def _check_weight_matrix(V: np.ndarray, dq: int) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.shape != (dq, dq):
        raise ValidationError(f"weighting matrix must be {dq}x{dq}")
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise ValidationError("weighting matrix is not positive definite") from None
    return V


def criterion_gn(
    ensemble: Ensemble,
    residuals: Sequence[SampledPath],
    hspec: HSpec,
    model: StructuralModel,
    gamma: CausalParams,
    V: np.ndarray | None,
    times: Sequence[float],
) -> float:
    """Quadratic-form criterion summed over evaluation times."""
    if not len(times):
        raise ValidationError("need at least one evaluation time")
    dq = hspec.d
    V = np.eye(dq) if V is None else _check_weight_matrix(V, dq)
    total = 0.0
    for t in times:
        mu = mu_hat(ensemble, residuals, hspec, model, gamma, t).ravel()
        total += float(mu @ V @ mu)
    return total


def _rate_matrix(ensemble: Ensemble, rates) -> np.ndarray:
    if isinstance(rates, np.ndarray):
        A = rates
    else:
        if len(rates) != ensemble.n:
            raise ValidationError(f"{len(rates)} rate paths for {ensemble.n} subjects")
        for i, path in enumerate(rates):
            if path.grid != ensemble.grid:
                raise GridMismatchError(f"rate path for subject {i} is on a different grid")
        A = np.stack([p.values for p in rates])
    if A.shape != ensemble.Y.shape:
        raise ValidationError("rate matrix must have shape (n, L+1)")
    return A


def _check_rate_positivity(A: np.ndarray, grid) -> None:
    flat = int(np.argmin(np.abs(A)))
    i, k = np.unravel_index(flat, A.shape)
    if abs(A[i, k]) < _RATE_FLOOR:
        raise PositivityError(
            f"treatment rate is {A[i, k]:.3g} for subject {i} at t={grid.points[k]:.6g}; "
            f"inverse-rate weighting needs |rate| >= {_RATE_FLOOR:g}"
        )


def weighting_mu_hat(
    ensemble: Ensemble,
    rates,
    hspec: HSpec,
    model: StructuralModel,
    gamma: CausalParams,
    t: float,
) -> np.ndarray:
    """Empirical inverse-rate weighting moments: centered integrands divided by
    the predictable jump rate, integrated against the raw treatment."""
    _check_scalar_treatment(ensemble)
    A = _rate_matrix(ensemble, rates)
    _check_rate_positivity(A, ensemble.grid)
    j = ensemble.grid.index_of(t)
    y0 = baseline_outcomes(ensemble, model, gamma)
    F = hspec.factor_matrix(ensemble)
    H = F * y0[None, :, None]
    centered = H - H.mean(axis=1, keepdims=True)
    dW = np.diff(ensemble.W[:, :, 0], axis=1)
    contrib = _subject_ito_sums(centered / A[None, :, :], dW, j)
    return contrib.mean(axis=1)[:, None]


# ---------------------------------------------------------------------------
# No-information-drift diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NidStat:
    s: float
    t: float
    regressor: str
    coef: float
    se: float
    stat: float
    flagged: bool


@dataclass(frozen=True)
class NidReport:
    rows: tuple[NidStat, ...]

    @property
    def any_flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    @property
    def flags(self) -> tuple[NidStat, ...]:
        return tuple(r for r in self.rows if r.flagged)


_NID_FLAG_LEVEL = 3.0


def nid_diagnostic(
    ensemble: Ensemble,
    residuals: Sequence[SampledPath],
    model: StructuralModel,
    gamma_ref: CausalParams,
    lags: Sequence[tuple[float, float]],
) -> NidReport:
    """Regress residual increments on the reference baseline outcome and the
    history at the increment start; standardized coefficients near zero are
    what no-information-drift predicts."""
    _check_scalar_treatment(ensemble)
    M = stack_residuals(ensemble, residuals)
    y0 = baseline_outcomes(ensemble, model, gamma_ref)
    n = ensemble.n
    rows: list[NidStat] = []
    for s, t in lags:
        js, jt = ensemble.grid.index_of(s), ensemble.grid.index_of(t)
        if js >= jt:
            raise ValidationError(f"need s < t, got ({s}, {t})")
        dM = M[:, jt] - M[:, js]
        X = np.column_stack(
            [
                np.ones(n),
                y0,
                ensemble.W[:, js, 0],
                ensemble.Y[:, js],
                ensemble.Z[:, js, 0] if ensemble.n_covariates else np.zeros(n),
            ]
        )
        names = ("intercept", "baseline_outcome", "W", "Y", "Z")
        if np.std(dM) == 0.0:
            raise ValidationError(
                f"degenerate residual increments over ({s}, {t}): zero variance"
            )
        for col in range(1, X.shape[1]):
            if np.std(X[:, col]) == 0.0:
                raise ValidationError(f"degenerate regressor variance: {names[col]!r}")
        coef, *_ = np.linalg.lstsq(X, dM, rcond=None)
        fitted = X @ coef
        dof = n - X.shape[1]
        sigma2 = float(np.sum((dM - fitted) ** 2)) / max(dof, 1)
        cov = sigma2 * np.linalg.inv(X.T @ X)
        ses = np.sqrt(np.diag(cov))
        for col, name in enumerate(names):
            if name == "intercept":
                continue
            stat = float(coef[col] / ses[col]) if ses[col] > 0 else math.inf
            rows.append(
                NidStat(
                    s=float(s),
                    t=float(t),
                    regressor=name,
                    coef=float(coef[col]),
                    se=float(ses[col]),
                    stat=stat,
                    flagged=abs(stat) > _NID_FLAG_LEVEL,
                )
            )
    return NidReport(rows=tuple(rows))


def default_nid_lags(grid) -> tuple[tuple[float, float], ...]:
    """Two increments covering the study window: (0, T/2) and (T/2, T)."""
    mid = grid.points[grid.steps // 2]
    return ((0.0, float(mid)), (float(mid), grid.horizon))


# ---------------------------------------------------------------------------
# Report and cached pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentReport:
    times: tuple[float, ...]
    moments: tuple[np.ndarray, ...]
    standard_errors: tuple[np.ndarray, ...]
    criterion: float

    def __post_init__(self):
        if self.criterion < 0:
            raise ValidationError("criterion must be nonnegative")


class _TerminalEffectCache:
    """Per-family cache for the terminal observed-treatment effect tau_T(gamma)."""

    def __init__(self, ensemble: Ensemble, model: StructuralModel):
        self.model = model
        self.grid = ensemble.grid
        W = ensemble.W[:, :, 0]
        dts = np.diff(ensemble.grid.points)
        self.y_T = ensemble.Y[:, -1]
        if model.family == "ou":
            self._w_dts = W[:, :-1] * dts
            self._tk = ensemble.grid.points[:-1]
        elif model.family in ("discrete", "posint"):
            self._cumdose = np.sum(W[:, :-1] * dts, axis=1)
        else:  # tte
            Z = ensemble.Z[:, :, 0]
            self._runmax = np.maximum.accumulate(Z, axis=1)
            self._w_prev = np.concatenate([W[:, :1], W[:, :-1]], axis=1)

    def tau_terminal(self, gamma: CausalParams) -> np.ndarray:
        family = self.model.family
        if family == "ou":
            T = self.grid.horizon
            kern = gamma.g1 * (
                gamma.g2 * np.exp(gamma.g3 * (self._tk - T))
                + (1 - gamma.g2) * np.exp(gamma.g4 * (self._tk - T))
            )
            return self._w_dts @ kern
        if family in ("discrete", "posint"):
            return gamma.eta1 * self._cumdose
        hit = self._runmax[:, -1] >= gamma.alpha2
        idx = np.argmax(self._runmax >= gamma.alpha2, axis=1)
        tau = np.where(hit, -self._w_prev[np.arange(idx.size), idx], 0.0)
        return tau

    def baseline(self, gamma: CausalParams) -> np.ndarray:
        return self.y_T - self.tau_terminal(gamma)


class MomentPipeline:
    """Moment evaluations bound to one (ensemble, residuals, integrand set),
    with the parameter-free pieces precomputed for use inside the optimizer.

    `method` selects orthogonalization (residual integrator) or inverse-rate
    weighting (raw treatment integrator with rate paths).
    """

    def __init__(
        self,
        ensemble: Ensemble,
        residuals: Sequence[SampledPath] | None,
        hspec: HSpec,
        model: StructuralModel,
        v: np.ndarray | None = None,
        times: Sequence[float] | None = None,
        method: str = "orth",
        rates=None,
    ):
        _check_scalar_treatment(ensemble)
        if ensemble.grid != model.grid:
            raise GridMismatchError("model and ensemble are on different grids")
        if method not in ("orth", "weight"):
            raise ValidationError(f"unknown method {method!r}")
        self.ensemble = ensemble
        self.hspec = hspec
        self.model = model
        self.method = method
        self.times = tuple(float(t) for t in (times if times is not None else (ensemble.grid.horizon,)))
        if not self.times:
            raise ValidationError("need at least one evaluation time")
        self._time_idx = [ensemble.grid.index_of(t) for t in self.times]
        dq = hspec.d
        self.V = np.eye(dq) if v is None else _check_weight_matrix(v, dq)
        self._effects = _TerminalEffectCache(ensemble, model)
        F = hspec.factor_matrix(ensemble)
        if method == "orth":
            if residuals is None:
                raise ValidationError("orthogonalization needs residual paths")
            M = stack_residuals(ensemble, residuals)
            dM = np.diff(M, axis=1)
            self._S = [_subject_ito_sums(F, dM, j) for j in self._time_idx]
        else:
            if rates is None:
                raise ValidationError("weighting needs rate paths")
            A = _rate_matrix(ensemble, rates)
            _check_rate_positivity(A, ensemble.grid)
            self._F = F
            self._dW_over_a = np.diff(ensemble.W[:, :, 0], axis=1) / A[:, :-1]

    @property
    def param_type(self):
        return self.model.param_type

    def _moment_terms(self, gamma: CausalParams, which: int) -> np.ndarray:
        """Per-subject moment contributions (d, n) at the `which`-th time."""
        y0 = self._effects.baseline(gamma)
        if self.method == "orth":
            return self._S[which] * y0
        j = self._time_idx[which]
        H = self._F * y0[None, :, None]
        centered = H - H.mean(axis=1, keepdims=True)
        return np.einsum("dnk,nk->dn", centered[:, :, :j], self._dW_over_a[:, :j])

    def mu(self, gamma: CausalParams, t: float) -> np.ndarray:
        which = self.times.index(float(t)) if float(t) in self.times else None
        if which is None:
            raise ValidationError(f"time {t} is not an evaluation time of this pipeline")
        return self._moment_terms(gamma, which).mean(axis=1)[:, None]

    def criterion(self, gamma: CausalParams) -> float:
        total = 0.0
        for which in range(len(self.times)):
            mu = self._moment_terms(gamma, which).mean(axis=1)
            total += float(mu @ self.V @ mu)
        return total

    def report(self, gamma: CausalParams) -> MomentReport:
        moments = []
        ses = []
        n = self.ensemble.n
        for which in range(len(self.times)):
            terms = self._moment_terms(gamma, which)
            moments.append(terms.mean(axis=1)[:, None])
            sd = np.std(terms, axis=1, ddof=1) if n > 1 else np.full(terms.shape[0], math.nan)
            ses.append((sd / math.sqrt(n))[:, None])
        return MomentReport(
            times=self.times,
            moments=tuple(moments),
            standard_errors=tuple(ses),
            criterion=self.criterion(gamma),
        )
