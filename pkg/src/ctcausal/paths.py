"""Time grids, cadlag step paths, per-subject trajectories, and ensembles.

Every process is carried as a step function on a shared strictly increasing
mesh: the value at ``t_k`` holds on ``[t_k, t_{k+1})``, and the left limit at
``t_k`` (k >= 1) is the value at ``t_{k-1}``. The left limit at ``t_0`` is
defined as the time-0 value (no jump at 0). Stochastic integrals use the value
at the left endpoint of each increment, which enforces predictability of the
integrand.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GridMismatchError, TrajectoryParseError, ValidationError

# Tolerance for matching a requested time against a grid point, relative to
# the horizon. Grid spacings are many orders of magnitude larger in practice.
_GRID_RTOL = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time mesh on [0, T] with first point 0 and last point T."""

    points: np.ndarray

    def __post_init__(self):
        pts = _freeze(self.points)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ValidationError("grid needs at least two points")
        if pts[0] != 0.0:
            raise ValidationError(f"grid must start at 0, got {pts[0]}")
        if not np.all(np.diff(pts) > 0):
            raise ValidationError("grid points must be strictly increasing")

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def steps(self) -> int:
        return self.points.size - 1

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.all(self.points == other.points)
        )

    def __hash__(self):
        return hash((self.points.size, self.horizon))

    def index_of(self, t: float) -> int:
        """Index of the grid point equal to t, or ValidationError if t is off-grid."""
        pts = self.points
        k = int(np.searchsorted(pts, t))
        tol = _GRID_RTOL * max(1.0, self.horizon)
        for j in (k - 1, k, k + 1):
            if 0 <= j < pts.size and abs(pts[j] - t) <= tol:
                return j
        raise ValidationError(f"time {t} is not a grid point")


def make_uniform_grid(horizon: float, steps: int) -> TimeGrid:
    """Uniform grid {k * horizon / steps : k = 0..steps}."""
    if not horizon > 0:
        raise ValidationError(f"horizon must be positive, got {horizon}")
    if not steps >= 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    return TimeGrid(np.arange(steps + 1) * (float(horizon) / steps))


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Step-function values on a grid; one scalar or one length-m vector per point."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _freeze(self.values)
        object.__setattr__(self, "values", vals)
        if vals.ndim not in (1, 2):
            raise ValidationError("path values must be 1-d (scalar) or 2-d (vector)")
        if vals.shape[0] != len(self.grid):
            raise ValidationError(
                f"path has {vals.shape[0]} values for a grid of {len(self.grid)} points"
            )

    @property
    def is_scalar(self) -> bool:
        return self.values.ndim == 1

    @property
    def width(self) -> int:
        return 1 if self.is_scalar else self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampledPath):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.values.shape == other.values.shape
            and bool(np.all(self.values == other.values))
        )

    def __hash__(self):
        return hash((self.grid, self.values.shape))

    def left_values(self) -> np.ndarray:
        """Left-limit value for each grid point (value at t_0 for the first)."""
        return np.concatenate([self.values[:1], self.values[:-1]], axis=0)

    def value_at(self, t: float):
        return self.values[self.grid.index_of(t)]

    def left_limit_at(self, t: float):
        k = self.grid.index_of(t)
        return self.values[max(k - 1, 0)]


def _require_scalar(path: SampledPath, name: str) -> None:
    if not path.is_scalar:
        raise ValidationError(f"{name} must be a scalar path")


def ito_sum(integrand: SampledPath, integrator: SampledPath, upto: float) -> float:
    """Ito-style sum of integrand left limits against integrator increments.

    The weight of the increment over (t_{k-1}, t_k] is the integrand value at
    t_{k-1}; the value at the endpoint `upto` itself never enters.
    """
    _require_scalar(integrand, "integrand")
    _require_scalar(integrator, "integrator")
    if integrand.grid != integrator.grid:
        raise GridMismatchError("integrand and integrator are on different grids")
    j = integrand.grid.index_of(upto)
    if j == 0:
        return 0.0
    return float(np.dot(integrand.values[:j], np.diff(integrator.values[: j + 1])))


def riemann_integral(path: SampledPath, upto: float) -> float:
    """Left-endpoint integral of a step path over [0, upto]."""
    _require_scalar(path, "path")
    j = path.grid.index_of(upto)
    if j == 0:
        return 0.0
    return float(np.dot(path.values[:j], np.diff(path.grid.points[: j + 1])))


def _as_matrix(values: np.ndarray) -> np.ndarray:
    return values[:, None] if values.ndim == 1 else values


@dataclass(frozen=True, eq=False)
class SubjectTrajectory:
    """One subject's (treatment, outcome, covariate) path bundle on a shared grid."""

    w: SampledPath
    y: SampledPath
    z: SampledPath

    def __post_init__(self):
        if not (self.w.grid == self.y.grid == self.z.grid):
            raise GridMismatchError("trajectory paths must share one grid")
        if not self.y.is_scalar:
            raise ValidationError("outcome path must be scalar")

    @property
    def grid(self) -> TimeGrid:
        return self.w.grid

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectTrajectory):
            return NotImplemented
        return self.w == other.w and self.y == other.y and self.z == other.z

    def __hash__(self):
        return hash((self.w, self.y, self.z))


@dataclass(frozen=True)
class EnsembleMeta:
    seed: int | None = None
    dgp: str | None = None


@dataclass(eq=False)
class Ensemble:
    """n subjects on one grid, stored as stacked arrays.

    W has shape (n, L+1, q), Y (n, L+1), Z (n, L+1, p-1). Equality compares the
    grid and path values only; `meta` carries provenance (seed, DGP label) and
    is not part of the serialized CSV form.
    """

    grid: TimeGrid
    W: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    meta: EnsembleMeta = field(default_factory=EnsembleMeta)

    def __post_init__(self):
        self.W = _freeze(self.W)
        self.Y = _freeze(self.Y)
        self.Z = _freeze(self.Z)
        L1 = len(self.grid)
        if self.W.ndim != 3 or self.Y.ndim != 2 or self.Z.ndim != 3:
            raise ValidationError("ensemble arrays must be W:(n,L+1,q) Y:(n,L+1) Z:(n,L+1,p-1)")
        n = self.W.shape[0]
        if n < 1:
            raise ValidationError("ensemble needs at least one subject")
        if self.Y.shape != (n, L1) or self.W.shape[1] != L1 or self.Z.shape[:2] != (n, L1):
            raise ValidationError("ensemble array shapes do not match the grid")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def q(self) -> int:
        return self.W.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.Z.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Ensemble):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.W.shape == other.W.shape
            and self.Z.shape == other.Z.shape
            and bool(np.all(self.W == other.W))
            and bool(np.all(self.Y == other.Y))
            and bool(np.all(self.Z == other.Z))
        )

    def subject(self, i: int) -> SubjectTrajectory:
        w = self.W[i, :, 0] if self.q == 1 else self.W[i]
        z = self.Z[i, :, 0] if self.n_covariates == 1 else self.Z[i]
        return SubjectTrajectory(
            w=SampledPath(self.grid, w),
            y=SampledPath(self.grid, self.Y[i]),
            z=SampledPath(self.grid, z),
        )

    def subjects(self) -> Iterable[SubjectTrajectory]:
        for i in range(self.n):
            yield self.subject(i)

    @classmethod
    def from_subjects(
        cls, trajectories: Sequence[SubjectTrajectory], meta: EnsembleMeta | None = None
    ) -> "Ensemble":
        if not trajectories:
            raise ValidationError("ensemble needs at least one subject")
        grid = trajectories[0].grid
        for i, traj in enumerate(trajectories):
            if traj.grid != grid:
                raise GridMismatchError(f"subject {i} is on a different grid")
        W = np.stack([_as_matrix(t.w.values) for t in trajectories])
        Y = np.stack([t.y.values for t in trajectories])
        Z = np.stack([_as_matrix(t.z.values) for t in trajectories])
        return cls(grid=grid, W=W, Y=Y, Z=Z, meta=meta or EnsembleMeta())


def _treatment_columns(q: int) -> list[str]:
    return ["W"] if q == 1 else [f"W{j}" for j in range(1, q + 1)]


def _covariate_columns(pz: int) -> list[str]:
    return [f"Z{j}" for j in range(1, pz + 1)]


def write_ensemble(ensemble: Ensemble, sink) -> None:
    """Write the trajectory CSV format; canonical float text round-trips exactly."""
    header = ["subject", "t"]
    header += _treatment_columns(ensemble.q)
    header.append("Y")
    header += _covariate_columns(ensemble.n_covariates)
    lines = [",".join(header)]
    times = [repr(float(t)) for t in ensemble.grid.points]
    for i in range(ensemble.n):
        Wi, Yi, Zi = ensemble.W[i], ensemble.Y[i], ensemble.Z[i]
        for k in range(len(ensemble.grid)):
            row = [str(i), times[k]]
            row += [repr(float(v)) for v in Wi[k]]
            row.append(repr(float(Yi[k])))
            row += [repr(float(v)) for v in Zi[k]]
            lines.append(",".join(row))
    sink.write("\n".join(lines))
    sink.write("\n")


def _parse_header(fields: list[str]) -> tuple[int, int]:
    if len(fields) < 3 or fields[0] != "subject" or fields[1] != "t":
        raise TrajectoryParseError(
            "missing or malformed header; expected subject,t,W[,...],Y[,Z1...]", line=1
        )
    rest = fields[2:]
    if rest[0] == "W":
        q = 1
        rest = rest[1:]
    else:
        q = 0
        while q < len(rest) and rest[q] == f"W{q + 1}":
            q += 1
        if q == 0:
            raise TrajectoryParseError("expected treatment column 'W' or 'W1..Wq'", line=1)
        rest = rest[q:]
    if not rest or rest[0] != "Y":
        raise TrajectoryParseError("expected outcome column 'Y' after treatment columns", line=1)
    rest = rest[1:]
    for j, name in enumerate(rest, start=1):
        if name != f"Z{j}":
            raise TrajectoryParseError(f"expected covariate column 'Z{j}'", line=1, column=name)
    return q, len(rest)


def read_ensemble(source) -> Ensemble:
    """Parse the trajectory CSV format into an Ensemble.

    All subjects must share identical time columns; rows are sorted by subject
    then time. Errors name the offending row/column.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise TrajectoryParseError("empty stream; missing header", line=1) from None
    q, pz = _parse_header([h.strip() for h in header])
    width = 2 + q + 1 + pz

    subjects: list[tuple[list[float], list[list[float]]]] = []  # (times, rows)
    seen: set[str] = set()
    current_id: str | None = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise TrajectoryParseError(
                f"expected {width} fields, got {len(row)}", line=lineno
            )
        sid = row[0].strip()
        if sid != current_id:
            if sid in seen:
                raise TrajectoryParseError(
                    f"rows for subject {sid} are not contiguous", line=lineno
                )
            seen.add(sid)
            current_id = sid
            subjects.append(([], []))
        try:
            numbers = [float(v) for v in row[1:]]
        except ValueError:
            bad = next(name for name, v in zip(header[1:], row[1:]) if not _is_float(v))
            raise TrajectoryParseError("non-numeric cell", line=lineno, column=bad) from None
        times, rows = subjects[-1]
        if times and numbers[0] <= times[-1]:
            raise TrajectoryParseError("non-increasing time", line=lineno, column="t")
        times.append(numbers[0])
        rows.append(numbers[1:])

    if not subjects:
        raise TrajectoryParseError("no data rows", line=2)

    ref_times = np.asarray(subjects[0][0])
    try:
        grid = TimeGrid(ref_times)
    except ValidationError as exc:
        raise TrajectoryParseError(f"invalid time column: {exc}", line=2) from None
    counts = {len(times) for times, _ in subjects}
    if len(counts) != 1:
        raise TrajectoryParseError("ragged subjects: unequal number of rows per subject")
    for i, (times, _) in enumerate(subjects):
        if not np.array_equal(np.asarray(times), ref_times):
            raise TrajectoryParseError(f"grid mismatch: subject index {i} differs", column="t")

    data = np.asarray([rows for _, rows in subjects])  # (n, L+1, q+1+pz)
    W = data[:, :, :q]
    Y = data[:, :, q]
    Z = data[:, :, q + 1 :]
    return Ensemble(grid=grid, W=W, Y=Y, Z=Z)


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False
