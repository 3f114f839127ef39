import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcausal import (
    Ensemble,
    EnsembleMeta,
    GridMismatchError,
    SampledPath,
    TimeGrid,
    TrajectoryParseError,
    ValidationError,
    ito_sum,
    make_uniform_grid,
    read_ensemble,
    riemann_integral,
    write_ensemble,
)


def path(grid, values):
    return SampledPath(grid, np.asarray(values, dtype=float))


class TestGrid:
    def test_uniform_grid_examples(self):
        assert make_uniform_grid(1.0, 2).points.tolist() == [0.0, 0.5, 1.0]
        assert make_uniform_grid(1.0, 1).points.tolist() == [0.0, 1.0]
        assert make_uniform_grid(2.0, 4).points.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]

    def test_invalid_arguments(self):
        with pytest.raises(ValidationError):
            make_uniform_grid(0.0, 2)
        with pytest.raises(ValidationError):
            make_uniform_grid(-1.0, 2)
        with pytest.raises(ValidationError):
            make_uniform_grid(1.0, 0)

    def test_grid_invariants(self):
        with pytest.raises(ValidationError):
            TimeGrid(np.array([0.0]))
        with pytest.raises(ValidationError):
            TimeGrid(np.array([0.1, 0.5]))
        with pytest.raises(ValidationError):
            TimeGrid(np.array([0.0, 0.5, 0.5]))

    def test_index_of(self):
        grid = make_uniform_grid(1.0, 200)
        assert grid.index_of(0.5) == 100
        assert grid.index_of(0.0) == 0
        assert grid.index_of(1.0) == 200
        with pytest.raises(ValidationError):
            grid.index_of(0.5001)


class TestItoSum:
    def test_telescoping(self):
        grid = make_uniform_grid(1.0, 4)
        integrand = path(grid, np.ones(5))
        integrator = path(grid, [0.0, 1.0, -0.5, 2.0, 2.5])
        assert ito_sum(integrand, integrator, 1.0) == pytest.approx(2.5)

    def test_direct_summation(self):
        grid = make_uniform_grid(1.0, 2)
        integrand = path(grid, [2.0, 3.0, 7.0])
        integrator = path(grid, [1.0, 4.0, 6.0])
        assert ito_sum(integrand, integrator, 1.0) == pytest.approx(12.0)

    def test_predictability_on_unit_jump(self):
        # integrand = left limits of a unit jump at 0.5: pre-jump value is 0
        grid = make_uniform_grid(1.0, 2)
        jump = path(grid, [0.0, 1.0, 1.0])
        left = path(grid, jump.left_values())
        assert ito_sum(left, jump, 1.0) == 0.0

    def test_grid_mismatch(self):
        a = path(make_uniform_grid(1.0, 2), np.ones(3))
        b = path(make_uniform_grid(1.0, 4), np.ones(5))
        with pytest.raises(GridMismatchError):
            ito_sum(a, b, 1.0)

    def test_off_grid_time(self):
        grid = make_uniform_grid(1.0, 2)
        a = path(grid, np.ones(3))
        with pytest.raises(ValidationError):
            ito_sum(a, a, 0.3)


class TestRiemann:
    def test_constant_path(self):
        grid = make_uniform_grid(1.0, 7)
        assert riemann_integral(path(grid, np.ones(8)), 1.0) == pytest.approx(1.0)

    def test_step_area(self):
        grid = make_uniform_grid(1.0, 10)
        values = 2.0 * (grid.points >= 0.5)
        assert riemann_integral(path(grid, values), 1.0) == pytest.approx(1.0)

    def test_zero_path(self):
        grid = make_uniform_grid(1.0, 3)
        assert riemann_integral(path(grid, np.zeros(4)), 1.0) == 0.0


# -- randomized path generators --------------------------------------------

values_list = st.lists(
    st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=3, max_size=12
)


@st.composite
def grid_and_paths(draw, n_paths=2):
    vals = draw(values_list)
    L1 = len(vals)
    grid = make_uniform_grid(draw(st.floats(min_value=0.1, max_value=5.0)), L1 - 1)
    paths = []
    for _ in range(n_paths):
        v = draw(st.lists(st.floats(-10, 10), min_size=L1, max_size=L1))
        paths.append(path(grid, v))
    return grid, paths


@settings(max_examples=200, deadline=None)
@given(grid_and_paths(n_paths=3))
def test_ito_bilinearity(gp):
    grid, (f, g, h) = gp
    T = grid.horizon
    lhs = ito_sum(path(grid, 2.0 * f.values + g.values), h, T)
    rhs = 2.0 * ito_sum(f, h, T) + ito_sum(g, h, T)
    assert lhs == pytest.approx(rhs, abs=1e-9)
    lhs2 = ito_sum(f, path(grid, g.values + h.values), T)
    rhs2 = ito_sum(f, g, T) + ito_sum(f, h, T)
    assert lhs2 == pytest.approx(rhs2, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(grid_and_paths(n_paths=2))
def test_ito_telescoping_and_window_additivity(gp):
    grid, (f, g) = gp
    T = grid.horizon
    ones = path(grid, np.ones(len(grid)))
    assert ito_sum(ones, g, T) == pytest.approx(g.values[-1] - g.values[0], abs=1e-9)
    mid = float(grid.points[len(grid) // 2])
    total = ito_sum(f, g, T)
    head = ito_sum(f, g, mid)
    tail = sum(
        f.values[k - 1] * (g.values[k] - g.values[k - 1])
        for k in range(grid.index_of(mid) + 1, len(grid))
    )
    assert total == pytest.approx(head + tail, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(grid_and_paths(n_paths=2))
def test_ito_matches_pairwise_oracle(gp):
    grid, (f, g) = gp
    # brute-force Lebesgue-Stieltjes sum over the step integrator
    total = 0.0
    for k in range(1, len(grid)):
        total += f.values[k - 1] * (g.values[k] - g.values[k - 1])
    assert ito_sum(f, g, grid.horizon) == pytest.approx(total, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=-5, max_value=5, allow_nan=False),
    st.floats(min_value=0.1, max_value=4.0),
    st.integers(min_value=1, max_value=40),
)
def test_riemann_constant(c, horizon, steps):
    grid = make_uniform_grid(horizon, steps)
    value = riemann_integral(path(grid, np.full(steps + 1, c)), horizon)
    assert value == pytest.approx(c * horizon, rel=1e-12, abs=1e-12)


# -- CSV format --------------------------------------------------------------


def small_ensemble(n=2, L=3, pz=1, seed=0):
    rng = np.random.default_rng(seed)
    grid = make_uniform_grid(1.0, L)
    return Ensemble(
        grid=grid,
        W=rng.standard_normal((n, L + 1, 1)),
        Y=rng.standard_normal((n, L + 1)),
        Z=rng.standard_normal((n, L + 1, pz)),
        meta=EnsembleMeta(seed=seed, dgp="test"),
    )


class TestCsv:
    def test_header_single_covariate(self):
        sink = io.StringIO()
        write_ensemble(small_ensemble(), sink)
        assert sink.getvalue().splitlines()[0] == "subject,t,W,Y,Z1"

    def test_round_trip_identity(self):
        ens = small_ensemble(n=3, L=5)
        sink = io.StringIO()
        write_ensemble(ens, sink)
        again = read_ensemble(io.StringIO(sink.getvalue()))
        assert again == ens

    def test_write_read_write_fixpoint(self):
        ens = small_ensemble(n=2, L=4)
        sink = io.StringIO()
        write_ensemble(ens, sink)
        text = sink.getvalue()
        sink2 = io.StringIO()
        write_ensemble(read_ensemble(io.StringIO(text)), sink2)
        assert sink2.getvalue() == text

    def test_row_count(self):
        ens = small_ensemble(n=4, L=6)
        sink = io.StringIO()
        write_ensemble(ens, sink)
        rows = sink.getvalue().strip().splitlines()
        assert len(rows) - 1 == 4 * 7

    def test_minimal_ensemble(self):
        text = "subject,t,W,Y,Z1\n0,0.0,1.0,2.0,3.0\n0,0.5,1.5,2.5,3.5\n"
        ens = read_ensemble(io.StringIO(text))
        assert ens.n == 1 and ens.grid.steps == 1

    def test_non_increasing_time(self):
        text = "subject,t,W,Y,Z1\n0,0.0,1,1,1\n0,0.5,1,1,1\n0,0.4,1,1,1\n"
        with pytest.raises(TrajectoryParseError, match="non-increasing time"):
            read_ensemble(io.StringIO(text))

    def test_grid_mismatch_between_subjects(self):
        text = (
            "subject,t,W,Y,Z1\n0,0.0,1,1,1\n0,0.5,1,1,1\n"
            "1,0.0,1,1,1\n1,0.7,1,1,1\n"
        )
        with pytest.raises(TrajectoryParseError, match="grid mismatch"):
            read_ensemble(io.StringIO(text))

    def test_non_numeric_cell_names_row_and_column(self):
        text = "subject,t,W,Y,Z1\n0,0.0,1,oops,1\n0,0.5,1,1,1\n"
        with pytest.raises(TrajectoryParseError, match=r"line 2.*'Y'"):
            read_ensemble(io.StringIO(text))

    def test_missing_header(self):
        with pytest.raises(TrajectoryParseError, match="header"):
            read_ensemble(io.StringIO("0,0.0,1,1,1\n"))

    def test_ragged_subjects(self):
        text = (
            "subject,t,W,Y,Z1\n0,0.0,1,1,1\n0,0.5,1,1,1\n0,1.0,1,1,1\n"
            "1,0.0,1,1,1\n1,0.5,1,1,1\n"
        )
        with pytest.raises(TrajectoryParseError):
            read_ensemble(io.StringIO(text))

    def test_multi_treatment_columns(self):
        grid = make_uniform_grid(1.0, 2)
        rng = np.random.default_rng(3)
        ens = Ensemble(
            grid=grid,
            W=rng.standard_normal((2, 3, 2)),
            Y=rng.standard_normal((2, 3)),
            Z=rng.standard_normal((2, 3, 1)),
        )
        sink = io.StringIO()
        write_ensemble(ens, sink)
        assert sink.getvalue().splitlines()[0] == "subject,t,W1,W2,Y,Z1"
        assert read_ensemble(io.StringIO(sink.getvalue())) == ens


@settings(max_examples=120, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2),
    st.integers(min_value=0, max_value=10_000),
)
def test_csv_round_trip_property(n, L, pz, seed):
    rng = np.random.default_rng(seed)
    grid = make_uniform_grid(float(rng.uniform(0.5, 3.0)), L)
    ens = Ensemble(
        grid=grid,
        W=rng.standard_normal((n, L + 1, 1)) * 10.0 ** rng.integers(-3, 4),
        Y=rng.standard_normal((n, L + 1)),
        Z=rng.standard_normal((n, L + 1, pz)),
    )
    sink = io.StringIO()
    write_ensemble(ens, sink)
    assert read_ensemble(io.StringIO(sink.getvalue())) == ens
