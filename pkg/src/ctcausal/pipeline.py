"""End-to-end runs wiring simulation, decomposition, moments, and solving,
with diff-able text outputs.

Result files are flat key=value text plus CSV tables. Wall-clock timing is
kept on the in-memory result only and never written to files, so re-running a
command with identical inputs reproduces every output byte.
"""

from __future__ import annotations

import dataclasses
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CtcError, ValidationError
from .estimators import CausalEffectEstimator, TreatmentDriftEstimator
from .moments import MomentReport, NidReport, default_nid_lags, nid_diagnostic
from .paths import Ensemble
from .simulate import TreatmentPlan, paper_ou_config, simulate_ou
from .structural import CausalParams, StructuralModel, counterfactual_path_estimate


@dataclass
class RunResult:
    family: str
    gamma: CausalParams
    nuisance: object
    criterion: float
    counterfactual_mean: float
    mc_truth: tuple[float, float] | None
    seed: int | None
    n: int
    timing_s: float

    def __post_init__(self):
        if self.criterion < 0:
            raise ValidationError("criterion must be nonnegative")


@contextmanager
def _stage(name: str):
    try:
        yield
    except CtcError as exc:
        exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise


def _param_items(prefix: str, params) -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        if value is None:
            continue
        items.append((f"{prefix}_{f.name}", repr(float(value))))
    return items


def result_lines(result: RunResult) -> list[str]:
    lines = [f"family={result.family}"]
    if result.seed is not None:
        lines.append(f"seed={result.seed}")
    lines.append(f"n={result.n}")
    lines += [f"{k}={v}" for k, v in _param_items("gamma", result.gamma)]
    if result.nuisance is not None:
        lines += [f"{k}={v}" for k, v in _param_items("nu", result.nuisance)]
    lines.append(f"criterion={result.criterion!r}")
    lines.append(f"counterfactual_mean={result.counterfactual_mean!r}")
    if result.mc_truth is not None:
        lines.append(f"mc_truth_mean={result.mc_truth[0]!r}")
        lines.append(f"mc_truth_se={result.mc_truth[1]!r}")
    return lines


def write_run_result(result: RunResult, path: Path) -> None:
    path.write_text("\n".join(result_lines(result)) + "\n", encoding="utf-8")


def write_moment_report(report: MomentReport, hspec_text: str, path: Path) -> None:
    descriptors = hspec_text.split(",")
    lines = ["time,descriptor,moment,se"]
    for t, mu, se in zip(report.times, report.moments, report.standard_errors):
        for row, name in enumerate(descriptors):
            lines.append(f"{t!r},{name},{float(mu[row, 0])!r},{float(se[row, 0])!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_counterfactual_paths(
    ensemble: Ensemble,
    model: StructuralModel,
    gamma: CausalParams,
    plan: TreatmentPlan,
    path: Path,
) -> None:
    """Per-time table of the factual outcome and the estimated potential-outcome
    path: ensemble means plus the first subject as an illustrative realization."""
    paths = np.stack(
        [
            counterfactual_path_estimate(traj, model, gamma, plan).values
            for traj in ensemble.subjects()
        ]
    )
    lines = ["t,y_factual_mean,y_counterfactual_mean,y_factual_first,y_counterfactual_first"]
    y_mean = ensemble.Y.mean(axis=0)
    cf_mean = paths.mean(axis=0)
    for k, t in enumerate(ensemble.grid.points):
        lines.append(
            f"{float(t)!r},{float(y_mean[k])!r},{float(cf_mean[k])!r},"
            f"{float(ensemble.Y[0, k])!r},{float(paths[0, k])!r}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_nid_report(report: NidReport, path: Path) -> None:
    lines = ["s,t,regressor,coef,se,stat,flagged"]
    for row in report.rows:
        lines.append(
            f"{row.s!r},{row.t!r},{row.regressor},{row.coef!r},{row.se!r},"
            f"{row.stat!r},{int(row.flagged)}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_estimation(
    family: str,
    ensemble: Ensemble,
    plan: TreatmentPlan,
    method: str = "orth",
    moments: str | None = None,
    times=None,
    joint: bool = False,
    out_dir: Path | None = None,
    options=None,
    seed: int | None = None,
    mc_truth: tuple[float, float] | None = None,
) -> RunResult:
    """Staged pipeline on an existing ensemble; writes the result files when
    an output directory is given."""
    started = time.perf_counter()
    estimator = CausalEffectEstimator(
        family=family,
        moments=moments,
        times=times,
        method=method,
        joint=joint,
        options=options,
    )
    with _stage("decompose/fit"):
        estimator.fit(ensemble)
    with _stage("counterfactual"):
        cf_mean = estimator.counterfactual_mean(plan)
    result = RunResult(
        family=family,
        gamma=estimator.gamma_,
        nuisance=estimator.nuisance_,
        criterion=estimator.criterion_,
        counterfactual_mean=cf_mean,
        mc_truth=mc_truth,
        seed=seed,
        n=ensemble.n,
        timing_s=time.perf_counter() - started,
    )
    if out_dir is not None:
        with _stage("write"):
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_run_result(result, out_dir / "result.txt")
            write_moment_report(
                estimator.report_, estimator._hspec().format(), out_dir / "moments.csv"
            )
            write_counterfactual_paths(
                ensemble, estimator.model_, estimator.gamma_, plan, out_dir / "cfpath.csv"
            )
    return result


def run_replication_sim7(
    seed: int, out_dir: Path | None = None, n: int = 2000, steps: int = 200
) -> RunResult:
    """The simulation-study pipeline: paper drift/diffusion, standard-normal
    start, two-stage nuisance + causal fit, counterfactual mean for the
    always-treat plan.

    The causal search starts from the effect parametrization implied by the
    known simulation drift and runs a single local solve. The moment design
    (four integrands, horizon time only, identity weights) leaves the effect
    kernel's shape directions statistically flat at this sample size, so
    multistart selection would only pick among indistinguishable points.
    """
    from .solve import SolveOptions
    from .structural import gamma_from_beta

    config = paper_ou_config(steps=steps)
    with _stage("simulate"):
        ensemble = simulate_ou(config, n, seed)
    plan = TreatmentPlan.constant(ensemble.grid, 1.0)
    started = time.perf_counter()
    estimator = CausalEffectEstimator(
        family="ou",
        gamma0=gamma_from_beta(config.beta),
        options=SolveOptions(restarts=0),
    )
    with _stage("decompose/fit"):
        estimator.fit(ensemble)
    with _stage("counterfactual"):
        cf_mean = estimator.counterfactual_mean(plan)
    result = RunResult(
        family="ou",
        gamma=estimator.gamma_,
        nuisance=estimator.nuisance_,
        criterion=estimator.criterion_,
        counterfactual_mean=cf_mean,
        mc_truth=None,
        seed=seed,
        n=ensemble.n,
        timing_s=time.perf_counter() - started,
    )
    if out_dir is not None:
        with _stage("write"):
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_run_result(result, out_dir / "result.txt")
            write_moment_report(
                estimator.report_, estimator._hspec().format(), out_dir / "moments.csv"
            )
            write_counterfactual_paths(
                ensemble, estimator.model_, estimator.gamma_, plan, out_dir / "cfpath.csv"
            )
    return result


def run_diagnose_nid(
    ensemble: Ensemble,
    gamma_ref: CausalParams,
    hide_z: bool = False,
    lags=None,
    out_path: Path | None = None,
    family: str = "ou",
) -> NidReport:
    """Fit a drift model (optionally hiding the covariate as a negative
    control), then test residual increments for information drift.

    For the continuously valued family the drift is fit at the increment
    level, whose regression residuals are pooled-orthogonal to the history by
    construction; the aggregated-equation fit is too noisy for a calibrated
    diagnostic."""
    from . import decompose

    with _stage("decompose"):
        if family == "ou":
            _, residuals = decompose.ou_increment_drift(ensemble, hide_z=hide_z)
        else:
            drift = TreatmentDriftEstimator(family=family, hide_z=hide_z)
            drift.fit(ensemble)
            residuals = drift.residuals_
    model = StructuralModel(family=family, grid=ensemble.grid)
    if lags is None:
        lags = default_nid_lags(ensemble.grid)
    with _stage("diagnose"):
        report = nid_diagnostic(ensemble, residuals, model, gamma_ref, lags)
    if out_path is not None:
        with _stage("write"):
            write_nid_report(report, Path(out_path))
    return report
