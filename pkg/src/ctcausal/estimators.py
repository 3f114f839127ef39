"""Estimator-style front end, so the pipeline composes with the wider
fit/transform ecosystem: parameters in ``__init__``, fitted state in
trailing-underscore attributes, ``get_params``/``set_params`` inherited.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import decompose
from .errors import ValidationError
from .moments import HSpec, MomentPipeline, PAPER_HSPEC
from .paths import Ensemble
from .simulate import TreatmentPlan
from .solve import SolveOptions, gmm_fit, minimize_with_restarts
from .structural import (
    DiscreteEffect,
    OuEffect,
    PosIntEffect,
    StructuralModel,
    TteEffect,
    counterfactual_mean_estimate,
    counterfactual_path_estimate,
)

# Per-family default integrands. The discrete mechanism is zero-mean jointly
# Gaussian, so integrands with a zero-mean path factor have no slope in eta1
# (third moments vanish); the constant-baseline integrand carries the signal.
DEFAULT_MOMENTS = {
    "ou": "base,zw:1,ww,yw",
    "discrete": "base",
    "tte": "zpow:1..3",
    "posint": "base",
}


def check_ensemble(X) -> Ensemble:
    """Validate the estimator input: an Ensemble with a scalar treatment."""
    if not isinstance(X, Ensemble):
        raise ValidationError(f"X must be an Ensemble, got {type(X).__name__}")
    if X.q != 1:
        raise ValidationError("estimators support scalar treatments")
    return X


class TreatmentDriftEstimator(BaseEstimator):
    """Fit the family's treatment-drift nuisance; transform data to residuals.

    Parameters
    ----------
    family : one of "ou", "discrete", "tte", "posint".
    eval_times : number of equation times for the ou stacked equations.
    hide_z : drop the covariate from the ou drift model (negative control).
    clamp : exponent clamp bounds for the posint jump rate.
    options : SolveOptions for the ou equation solve.
    """

    def __init__(self, family="ou", eval_times=10, hide_z=False, clamp=(-3.0, 3.0), options=None):
        self.family = family
        self.eval_times = eval_times
        self.hide_z = hide_z
        self.clamp = clamp
        self.options = options

    def fit(self, X, y=None):
        ensemble = check_ensemble(X)
        if self.family == "ou":
            grid_times = decompose.default_nuisance_times(ensemble.grid, self.eval_times)
            fit = decompose.estimate_ou_nuisance(
                ensemble, grid_times, options=self.options, hide_z=self.hide_z
            )
            self.nuisance_ = fit.params
            self.residual_norm_ = fit.residual_norm
            self.residuals_ = decompose.ou_residuals(ensemble, fit.params)
            self.rates_ = None
        elif self.family == "discrete":
            nuisance, compensators = decompose.discrete_compensator_fit(ensemble)
            self.nuisance_ = nuisance
            self.residuals_ = [
                decompose.residual_from_compensator(traj, comp)
                for traj, comp in zip(ensemble.subjects(), compensators)
            ]
            self.rates_ = None
        elif self.family == "tte":
            alpha1 = decompose.estimate_tte_alpha1(ensemble)
            self.nuisance_ = decompose.TteNuisance(alpha1=alpha1)
            self.alpha0_ = decompose.estimate_tte_alpha0(ensemble)
            self.residuals_ = decompose.tte_residuals(ensemble, alpha1)
            self.rates_ = None
        elif self.family == "posint":
            lo, hi = self.clamp
            lam = decompose.estimate_posint_rate(ensemble, lo, hi)
            self.nuisance_ = decompose.PosIntNuisance(lam=lam, clamp_lo=lo, clamp_hi=hi)
            self.residuals_ = decompose.posint_residuals(ensemble, self.nuisance_)
            self.rates_ = decompose.posint_rate_matrix(ensemble, self.nuisance_)
        else:
            raise ValidationError(f"unknown family {self.family!r}")
        return self

    def transform(self, X):
        """Residual paths of X under the fitted nuisance."""
        ensemble = check_ensemble(X)
        nuisance = self.nuisance_
        if self.family == "ou":
            return decompose.ou_residuals(ensemble, nuisance)
        if self.family == "discrete":
            comps = decompose.discrete_compensator_from_coefficients(ensemble, nuisance)
            return [
                decompose.residual_from_compensator(traj, comp)
                for traj, comp in zip(ensemble.subjects(), comps)
            ]
        if self.family == "tte":
            return decompose.tte_residuals(ensemble, nuisance.alpha1)
        return decompose.posint_residuals(ensemble, nuisance)


def _default_gamma0(family: str, ensemble: Ensemble):
    if family == "ou":
        return OuEffect(g1=0.25, g2=0.5, g3=0.5, g4=1.5)
    if family == "discrete":
        return DiscreteEffect(eta1=0.0)
    if family == "posint":
        return PosIntEffect(eta1=0.0)
    # tte: a subject with an observed adverse event caps the threshold by the
    # covariate value at the event, so start from the tightest such cap.
    Y = ensemble.Y
    Z = ensemble.Z[:, :, 0]
    jumpers = np.nonzero(Y[:, -1] > 0)[0]
    if jumpers.size:
        caps = []
        for i in jumpers:
            k = int(np.nonzero(Y[i] > 0)[0][0])
            caps.append(Z[i, k])
        return TteEffect(alpha2=float(min(caps)))
    top = float(np.max(Z))
    if top <= 0:
        raise ValidationError("covariate never positive: threshold start undefined")
    return TteEffect(alpha2=0.75 * top)


class CausalEffectEstimator(BaseEstimator):
    """End-to-end causal fit: nuisance stage, moment construction, and the
    minimum-criterion causal parameter, with counterfactual predictions.

    Parameters
    ----------
    family : DGP family of the data.
    moments : integrand spec string (defaults per family).
    times : evaluation times for the moments (default: the horizon only).
    method : "orth" (residual integrator) or "weight" (inverse-rate weighting).
    weight_matrix : positive-definite quadratic-form weights (default identity).
    joint : re-solve nuisance and causal equations jointly (ou family only).
    gamma0 : starting causal parameters (defaults per family, data-driven for tte).
    drift : optional pre-configured TreatmentDriftEstimator.
    options : SolveOptions for the criterion minimization.
    """

    def __init__(
        self,
        family="ou",
        moments=None,
        times=None,
        method="orth",
        weight_matrix=None,
        joint=False,
        gamma0=None,
        drift=None,
        options=None,
    ):
        self.family = family
        self.moments = moments
        self.times = times
        self.method = method
        self.weight_matrix = weight_matrix
        self.joint = joint
        self.gamma0 = gamma0
        self.drift = drift
        self.options = options

    def _hspec(self) -> HSpec:
        text = self.moments or DEFAULT_MOMENTS.get(self.family)
        if text is None:
            raise ValidationError(f"unknown family {self.family!r}")
        return text if isinstance(text, HSpec) else HSpec.parse(text)

    def fit(self, X, y=None):
        ensemble = check_ensemble(X)
        drift = self.drift if self.drift is not None else TreatmentDriftEstimator(self.family)
        drift.fit(ensemble)
        model = StructuralModel(family=self.family, grid=ensemble.grid)
        hspec = self._hspec()
        if self.method == "weight" and drift.rates_ is None:
            # Only the strictly-positive-rate family has an everywhere-nonzero
            # predictable rate; other families fail the positivity check below.
            rates = _drift_rate_matrix(self.family, ensemble, drift)
        else:
            rates = drift.rates_
        pipeline = MomentPipeline(
            ensemble,
            drift.residuals_,
            hspec,
            model,
            v=self.weight_matrix,
            times=self.times,
            method=self.method,
            rates=rates,
        )
        gamma0 = self.gamma0 if self.gamma0 is not None else _default_gamma0(self.family, ensemble)
        options = self.options or SolveOptions()
        domain = None
        if self.family == "tte":
            # restrict the threshold search to the interval consistent with
            # the observed jumps (a hard, assumption-free data constraint)
            floor, cap = decompose.tte_alpha2_bounds(ensemble)
            domain = lambda vec: floor < float(vec[0]) <= cap  # noqa: E731
        result = gmm_fit(pipeline, gamma0, options, domain=domain)
        gamma, criterion, report = result.gamma, result.criterion, result.report
        if self.joint:
            gamma, nuisance, criterion = _joint_ou_refit(
                ensemble, hspec, model, pipeline, drift, gamma, options
            )
            drift.nuisance_ = nuisance
            drift.residuals_ = decompose.ou_residuals(ensemble, nuisance)
            pipeline = MomentPipeline(
                ensemble, drift.residuals_, hspec, model,
                v=self.weight_matrix, times=self.times,
            )
            report = pipeline.report(gamma)
        self.drift_ = drift
        self.nuisance_ = drift.nuisance_
        self.model_ = model
        self.pipeline_ = pipeline
        self.gamma_ = gamma
        self.criterion_ = float(criterion)
        self.report_ = report
        self.ensemble_ = ensemble
        return self

    def counterfactual_mean(self, plan: TreatmentPlan, X: Ensemble | None = None) -> float:
        ensemble = self.ensemble_ if X is None else check_ensemble(X)
        return counterfactual_mean_estimate(ensemble, self.model_, self.gamma_, plan)

    def counterfactual_path(self, traj, plan: TreatmentPlan):
        return counterfactual_path_estimate(traj, self.model_, self.gamma_, plan)


def _drift_rate_matrix(family, ensemble, drift):
    """Predictable rate-of-change paths for inverse-rate weighting."""
    grid = ensemble.grid
    if family == "ou":
        nu = drift.nuisance_
        _, Y, Z = decompose._scalar_arrays(ensemble)
        W = ensemble.W[:, :, 0]
        return -(nu.nu1 * Y + nu.nu2 * W + nu.nu3 * Z)
    if family == "tte":
        iotas = decompose.tte_iota1_times(ensemble, drift.nuisance_.alpha1)
        pts = grid.points
        W = ensemble.W[:, :, 0]
        return (pts[None, :] >= iotas[:, None]).astype(float) * (1.0 - W)
    if family == "discrete":
        nu = drift.nuisance_
        _, Y, Z = decompose._scalar_arrays(ensemble)
        W = ensemble.W[:, :, 0]
        dt = grid.horizon / grid.steps
        return (nu.intercept + nu.coef_w * W + nu.coef_y * Y + nu.coef_z * Z) / dt
    raise ValidationError(f"no rate model for family {family!r}")


def _joint_ou_refit(ensemble, hspec, model, pipeline, drift, gamma_start, options):
    """Minimize the stacked nuisance equations plus the causal criterion over
    (nu, gamma) jointly; residual Ito sums are linear in nu, so the moment
    pieces are precomputed once."""
    if model.family != "ou":
        raise ValidationError("joint estimation is available for the ou family only")
    grid_times = decompose.default_nuisance_times(ensemble.grid, drift.eval_times)
    cache = decompose._OuEquationCache(ensemble, grid_times)
    W, Y, Z = decompose._scalar_arrays(ensemble)
    dts = np.diff(ensemble.grid.points)
    F = hspec.factor_matrix(ensemble)
    d_base = np.diff(W, axis=1)
    effects = pipeline._effects
    time_idx = pipeline._time_idx
    V = pipeline.V

    def part(matrix):
        incr = matrix[:, :-1] * dts
        from .moments import _subject_ito_sums

        return [_subject_ito_sums(F, incr, j) for j in time_idx]

    from .moments import _subject_ito_sums

    S0 = [_subject_ito_sums(F, d_base, j) for j in time_idx]
    SY, SW, SZ = part(Y), part(W), part(Z)
    param_type = model.param_type

    def objective(x):
        nu = x[:4]
        gvec = x[4:]
        if nu[3] <= 0 or not param_type.in_domain(gvec):
            return np.inf
        eqs = cache.equations(nu[0], nu[1], nu[2], nu[3])
        gamma = param_type.from_vector(gvec)
        y0 = effects.baseline(gamma)
        total = float(np.dot(eqs, eqs))
        for which in range(len(time_idx)):
            S = S0[which] + nu[0] * SY[which] + nu[1] * SW[which] + nu[2] * SZ[which]
            mu = np.mean(S * y0, axis=1)
            total += float(mu @ V @ mu)
        return total

    x0 = np.concatenate([drift.nuisance_.to_vector(), gamma_start.to_vector()])
    result = minimize_with_restarts(objective, x0, options)
    nu = decompose.OuNuisance(
        nu1=result.x[0], nu2=result.x[1], nu3=result.x[2], nu4=result.x[3]
    )
    gamma = param_type.from_vector(result.x[4:])
    return gamma, nu, result.value
