"""Continuous-time causal inference for trajectory treatments.

Simulates confounded continuous-time data-generating processes, decomposes the
treatment into predictable drift and martingale residual, builds moment
conditions by orthogonalization or inverse-rate weighting, and estimates
causal structural parameters and counterfactual means.
"""

from .decompose import (
    CompensatorPath,
    DiscreteNuisance,
    OuNuisance,
    PosIntNuisance,
    ResidualPath,
    TteNuisance,
    counting_compensator,
    discrete_compensator_fit,
    estimate_ou_nuisance,
    estimate_posint_rate,
    estimate_tte_alpha0,
    estimate_tte_alpha1,
    ou_nuisance_equations,
    ou_residual,
    posint_compensator,
    residual_from_compensator,
)
from .errors import (
    ConvergenceError,
    CtcError,
    GridMismatchError,
    PositivityError,
    TrajectoryParseError,
    UnsupportedParametrizationError,
    ValidationError,
)
from .estimators import CausalEffectEstimator, TreatmentDriftEstimator, check_ensemble
from .moments import (
    HSpec,
    MomentPipeline,
    MomentReport,
    NidReport,
    criterion_gn,
    mu_hat,
    nid_diagnostic,
    weighting_mu_hat,
)
from .paths import (
    Ensemble,
    EnsembleMeta,
    SampledPath,
    SubjectTrajectory,
    TimeGrid,
    ito_sum,
    make_uniform_grid,
    read_ensemble,
    riemann_integral,
    write_ensemble,
)
from .pipeline import RunResult, run_diagnose_nid, run_estimation, run_replication_sim7
from .simulate import (
    DiscreteConfig,
    McEstimate,
    OuConfig,
    PosIntConfig,
    TreatmentPlan,
    TteConfig,
    paper_ou_config,
    simulate_discrete,
    simulate_ou,
    simulate_ou_counterfactual,
    simulate_posint,
    simulate_tte,
    true_counterfactual_mean,
)
from .solve import GmmResult, SolveOptions, gmm_fit, nelder_mead, solve_stacked
from .structural import (
    CausalParams,
    DiscreteEffect,
    OuEffect,
    PosIntEffect,
    StructuralModel,
    TteEffect,
    baseline_outcome,
    baseline_outcomes,
    counterfactual_mean_estimate,
    counterfactual_path_estimate,
    gamma_from_beta,
    plan_from_spec,
    stochastic_intervention_mean,
    tau_discrete,
    tau_ou,
    tau_posint,
    tau_tte,
)

__version__ = "0.1.0"
