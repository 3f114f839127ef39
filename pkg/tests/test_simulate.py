import math

import numpy as np
import pytest

import ctcausal as ct
from ctcausal import (
    DiscreteConfig,
    OuConfig,
    PosIntConfig,
    TreatmentPlan,
    TteConfig,
    ValidationError,
    paper_ou_config,
    riemann_integral,
    simulate_discrete,
    simulate_ou,
    simulate_ou_counterfactual,
    simulate_posint,
    simulate_tte,
    true_counterfactual_mean,
)
from ctcausal.simulate import (
    config_from_mapping,
    parse_config_text,
    simulate_counterfactual,
    simulate_discrete_counterfactual,
)

# Derived constants (see test docstrings for the oracles that produced them)
GAMMA_STAR = (0.5, 0.6632993162, 0.7550510257, 1.2449489743)
CF_MEAN_TRUTH = 0.32909122  # continuous-time mean-ODE solution for plan = 1
PHI_HALF_TAIL = 0.6170750775  # 2(1 - Phi(0.5)), reflection principle


def mean_ode_oracle(Bt, b, horizon, steps=20_000):
    """RK4 for dm/dt = -Bt m + b, m(0) = 0ies; first component at the horizon."""
    dt = horizon / steps
    m = np.zeros(len(b))

    def f(x):
        return -Bt @ x + b

    for _ in range(steps):
        k1 = f(m)
        k2 = f(m + dt / 2 * k1)
        k3 = f(m + dt / 2 * k2)
        k4 = f(m + dt * k3)
        m = m + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return m[0]


class TestOuConfig:
    def test_sigma_structural_zeros(self):
        bad = np.array([[0.1, 0.2], [0.0, 0.1], [0.1, 0.0]])
        with pytest.raises(ValidationError):
            OuConfig(sigma=bad)

    def test_shapes(self):
        with pytest.raises(ValidationError):
            OuConfig(beta=np.eye(2))


class TestSimulateOu:
    def test_no_dynamics(self):
        cfg = OuConfig(
            beta=np.zeros((3, 3)),
            sigma=np.zeros((3, 2)),
            init_mean=np.ones(3),
            init_cov=np.zeros((3, 3)),
            steps=20,
        )
        ens = simulate_ou(cfg, 3, seed=0)
        assert np.all(ens.Y == 1.0) and np.all(ens.W == 1.0) and np.all(ens.Z == 1.0)

    def test_time_zero_standard_normal_mean(self):
        ens = simulate_ou(paper_ou_config(), 2000, seed=7)
        bound = 3.0 / math.sqrt(2000)
        assert abs(ens.Y[:, 0].mean()) < bound
        assert abs(ens.W[:, :, 0][:, 0].mean()) < bound
        assert abs(ens.Z[:, :, 0][:, 0].mean()) < bound

    def test_deterministic_decay_matches_ode(self):
        cfg = OuConfig(
            beta=np.eye(3),
            sigma=np.zeros((3, 2)),
            init_mean=np.ones(3),
            init_cov=np.zeros((3, 3)),
            steps=1000,
        )
        ens = simulate_ou(cfg, 1, seed=0)
        assert ens.Y[0, -1] == pytest.approx(math.exp(-1), abs=1e-2)

    def test_determinism_and_offset_consistency(self):
        cfg = paper_ou_config(steps=50)
        a = simulate_ou(cfg, 6, seed=9)
        b = simulate_ou(cfg, 6, seed=9)
        assert a == b
        tail = simulate_ou(cfg, 2, seed=9, subject_offset=4)
        assert np.array_equal(tail.Y, a.Y[4:6])

    def test_thread_count_does_not_change_output(self, monkeypatch):
        cfg = paper_ou_config(steps=50)
        base = simulate_ou(cfg, 7, seed=3)
        monkeypatch.setenv("CTC_THREADS", "4")
        assert simulate_ou(cfg, 7, seed=3) == base

    def test_lyapunov_covariance(self):
        """Empirical covariance vs the exact covariance recursion of the Euler
        chain (and its fine-step version as the continuous-time anchor)."""
        cfg = paper_ou_config()
        n = 40_000
        cfg0 = OuConfig(init_cov=np.zeros((3, 3)), steps=cfg.steps)
        ens = simulate_ou(cfg0, n, seed=13)
        X = np.stack([ens.Y[:, -1], ens.W[:, -1, 0], ens.Z[:, -1, 0]], axis=1)
        emp = np.cov(X.T)

        def chain_cov(steps):
            dt = cfg.horizon / steps
            A = np.eye(3) - cfg.beta * dt
            Q = cfg.sigma @ cfg.sigma.T * dt
            S = np.zeros((3, 3))
            for _ in range(steps):
                S = A @ S @ A.T + Q
            return S

        exact = chain_cov(cfg.steps)
        fine = chain_cov(10 * cfg.steps)
        se = np.abs(exact) * math.sqrt(2.0 / n) + 2e-4
        assert np.all(np.abs(emp - exact) < 4 * se)
        # the fine-step oracle differs only by the O(dt) chain bias
        assert np.all(np.abs(exact - fine) < 5e-5 + 0.01 * np.abs(fine))


class TestSimulateOuCounterfactual:
    def test_feedback_consistency(self):
        cfg = paper_ou_config(steps=80)
        ens = simulate_ou(cfg, 5, seed=21)
        for i in range(5):
            plan = TreatmentPlan.from_values(ens.grid, ens.W[i, :, 0])
            cf = simulate_ou_counterfactual(cfg, plan, 1, seed=21, subject_offset=i)
            assert np.array_equal(cf.Y[0], ens.Y[i])
            assert np.array_equal(cf.Z[0, :, 0], ens.Z[i, :, 0])

    def test_zero_everything(self):
        cfg = OuConfig(sigma=np.zeros((3, 2)), init_cov=np.zeros((3, 3)), steps=20)
        plan = TreatmentPlan.constant(cfg.grid, 0.0)
        cf = simulate_ou_counterfactual(cfg, plan, 2, seed=0)
        assert np.all(cf.Y == 0.0)

    def test_always_treat_mean(self):
        """Sample mean of the terminal counterfactual outcome against the
        mean-ODE oracle (dm/dt = -Bt m + b with Bt = [[1,.2],[.3,1]],
        b = (.5,-.2) gives m_Y(1) = 0.3291)."""
        cfg = paper_ou_config()
        Bt = np.array([[1.0, 0.2], [0.3, 1.0]])
        b = np.array([0.5, -0.2])
        oracle = mean_ode_oracle(Bt, b, 1.0)
        assert oracle == pytest.approx(CF_MEAN_TRUTH, abs=1e-6)
        plan = TreatmentPlan.constant(cfg.grid, 1.0)
        est = true_counterfactual_mean(cfg, plan, 100_000, seed=5)
        assert est.mean == pytest.approx(oracle, abs=0.01)

    def test_plan_grid_mismatch(self):
        cfg = paper_ou_config(steps=50)
        plan = TreatmentPlan.constant(ct.make_uniform_grid(1.0, 10), 1.0)
        with pytest.raises(ct.GridMismatchError):
            simulate_ou_counterfactual(cfg, plan, 1, seed=0)


class TestSimulateDiscrete:
    def test_all_zero(self):
        cfg = DiscreteConfig(eta0=0.0, eta1=0.0, sd_z=0.0, sd_w=0.0, sd_y=0.0)
        ens = simulate_discrete(cfg, 3, seed=0)
        assert np.all(ens.Y == 0.0) and np.all(ens.W == 0.0) and np.all(ens.Z == 0.0)

    def test_counterfactual_dose_identity(self):
        """Regenerating with the same noise under the zero plan leaves exactly
        the cumulative-dose effect."""
        cfg = DiscreteConfig(eta1=1.5)
        ens = simulate_discrete(cfg, 50, seed=4)
        zero = TreatmentPlan.constant(ens.grid, 0.0)
        cf = simulate_discrete_counterfactual(cfg, zero, 50, seed=4)
        dt = cfg.horizon / cfg.J
        dose = ens.W[:, :-1, 0].sum(axis=1) * dt
        np.testing.assert_allclose(ens.Y[:, -1] - cf.Y[:, -1], 1.5 * dose, atol=1e-12)

    def test_assignment_drift_centered(self):
        """The generating recursion is its own compensator oracle: increments
        minus the assignment drift are centered at every period."""
        cfg = DiscreteConfig()
        ens = simulate_discrete(cfg, 5000, seed=2)
        W, Y, Z = ens.W[:, :, 0], ens.Y, ens.Z[:, :, 0]
        for k in range(1, cfg.J + 1):
            resid = (W[:, k] - W[:, k - 1]) - (
                -0.5 * W[:, k - 1] + 0.3 * Z[:, k - 1] + 0.2 * Y[:, k - 1]
            )
            se = resid.std(ddof=1) / math.sqrt(ens.n)
            assert abs(resid.mean()) < 3 * se


class TestSimulateTte:
    def test_unreachable_threshold(self):
        cfg = TteConfig(alpha0=0.01, alpha1=5.0, alpha2=6.0, steps=50)
        ens = simulate_tte(cfg, 20, seed=0)
        assert np.all(ens.W == 0.0)

    def test_monotone_01_and_suppression(self):
        cfg = TteConfig(1.0, 0.5, 1.0)
        ens = simulate_tte(cfg, 500, seed=1)
        W, Y, Z = ens.W[:, :, 0], ens.Y, ens.Z[:, :, 0]
        assert set(np.unique(W)) <= {0.0, 1.0} and set(np.unique(Y)) <= {0.0, 1.0}
        assert np.all(np.diff(W, axis=1) >= 0) and np.all(np.diff(Y, axis=1) >= 0)
        for i in range(ens.n):
            if Y[i, -1] == 1.0:
                k = int(np.nonzero(Y[i] > 0)[0][0])
                # treatment cannot have started strictly before the event
                assert W[i, max(k - 1, 0)] == 0.0

    def test_hitting_fraction_reflection_principle(self):
        """P(max of a standard Brownian path over [0,1] >= 0.5) = 2(1-Phi(0.5)).
        Fine mesh keeps the discrete-monitoring bias inside the tolerance."""
        cfg = TteConfig(alpha0=1.0, alpha1=0.5, alpha2=1.0, steps=20_000)
        hits = 0
        n_total = 20_000
        batch = 1000
        for b in range(n_total // batch):
            ens = simulate_tte(cfg, batch, seed=1000 + b)
            hits += int(np.sum(ens.Z[:, :, 0].max(axis=1) >= cfg.alpha1))
        assert hits / n_total == pytest.approx(PHI_HALF_TAIL, abs=0.01)


class TestSimulatePosint:
    def test_vanishing_rate(self):
        cfg = PosIntConfig(lam=1e-12, eta1=0.8, steps=50)
        ens = simulate_posint(cfg, 20, seed=0)
        assert np.all(np.abs(ens.W) < 1e-9)
        np.testing.assert_allclose(ens.Y, ens.Z[:, :, 0], atol=1e-12)

    def test_zero_effect(self):
        cfg = PosIntConfig(lam=0.5, eta1=0.0, steps=50)
        ens = simulate_posint(cfg, 20, seed=0)
        np.testing.assert_allclose(ens.Y, ens.Z[:, :, 0], atol=1e-12)

    def test_pathwise_outcome_identity(self):
        cfg = PosIntConfig(lam=0.5, eta1=0.8)
        ens = simulate_posint(cfg, 50, seed=3)
        for i in range(ens.n):
            traj = ens.subject(i)
            dose = riemann_integral(traj.w, cfg.horizon)
            assert traj.y.values[-1] - 0.8 * dose - traj.z.values[-1] == pytest.approx(
                0.0, abs=1e-12
            )

    def test_compensator_identity(self):
        cfg = PosIntConfig(lam=0.5, eta1=0.8)
        ens = simulate_posint(cfg, 5000, seed=8)
        W, Y, Z = ens.W[:, :, 0], ens.Y, ens.Z[:, :, 0]
        dts = np.diff(ens.grid.points)
        rate = cfg.lam * np.exp(np.clip(Z + Y, cfg.clamp_lo, cfg.clamp_hi))
        A_T = np.sum(rate[:, :-1] * dts, axis=1)
        diff = W[:, -1] - A_T
        se = diff.std(ddof=1) / math.sqrt(ens.n)
        assert abs(diff.mean()) < 3 * se


class TestTruth:
    def test_truth_batching_invariance(self):
        cfg = paper_ou_config(steps=20)
        plan = TreatmentPlan.constant(cfg.grid, 1.0)
        import ctcausal.simulate as sim

        full = true_counterfactual_mean(cfg, plan, 500, seed=11)
        old = sim._TRUTH_BATCH
        try:
            sim._TRUTH_BATCH = 100
            batched = true_counterfactual_mean(cfg, plan, 500, seed=11)
        finally:
            sim._TRUTH_BATCH = old
        assert full == batched

    def test_truth_paper_config(self):
        cfg = paper_ou_config()
        plan = TreatmentPlan.constant(cfg.grid, 1.0)
        est = true_counterfactual_mean(cfg, plan, 200_000, seed=17)
        assert est.mean == pytest.approx(CF_MEAN_TRUTH, abs=0.005)
        assert est.se < 0.002

    def test_truth_zero_plan_zero_mean(self):
        cfg = paper_ou_config()
        plan = TreatmentPlan.constant(cfg.grid, 0.0)
        est = true_counterfactual_mean(cfg, plan, 20_000, seed=3)
        assert abs(est.mean) < 3 * est.se

    def test_truth_tte_always_treat_is_zero(self):
        cfg = TteConfig(1.0, 0.5, 1.0)
        plan = TreatmentPlan.constant(cfg.grid, 1.0)
        est = true_counterfactual_mean(cfg, plan, 500, seed=0)
        assert est.mean == 0.0

    def test_counterfactual_dispatch_matches_family(self):
        cfg = PosIntConfig(steps=20)
        plan = TreatmentPlan.constant(cfg.grid, 1.0)
        ens = simulate_counterfactual(cfg, plan, 5, seed=0)
        assert ens.meta.dgp == "posint-counterfactual"

    def test_nmc_validation(self):
        cfg = paper_ou_config(steps=10)
        with pytest.raises(ValidationError):
            true_counterfactual_mean(cfg, TreatmentPlan.constant(cfg.grid, 1.0), 1, seed=0)


class TestConfigFile:
    def test_parse_and_build(self):
        text = """
        # comment
        dgp=ou
        T=1.0
        steps=100
        n=50
        seed=9
        beta=1,-0.5,0.2,-0.7,1,-0.6,0.3,0.2,1
        sigma=0.1,0,0,0.1,0.1,0
        init_mean=0,0,0
        init_cov=1,0,0,0,1,0,0,0,1
        """
        raw = parse_config_text(text)
        cfg = config_from_mapping(raw, dgp="ou")
        assert isinstance(cfg, OuConfig) and cfg.steps == 100
        np.testing.assert_allclose(cfg.beta, paper_ou_config().beta)

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="unknown key"):
            parse_config_text("dgp=ou\nbogus=1\n")

    def test_duplicate_key(self):
        with pytest.raises(ValidationError, match="duplicate"):
            parse_config_text("T=1\nT=2\n")

    def test_key_not_valid_for_family(self):
        raw = parse_config_text("dgp=tte\nlambda=0.5\n")
        with pytest.raises(ValidationError, match="not valid"):
            config_from_mapping(raw)

    def test_dgp_conflict(self):
        raw = parse_config_text("dgp=ou\n")
        with pytest.raises(ValidationError, match="conflicts"):
            config_from_mapping(raw, dgp="tte")

    def test_posint_keys(self):
        raw = parse_config_text("dgp=posint\nlambda=0.7\neta1=0.3\nclamp_lo=-2\nclamp_hi=2\n")
        cfg = config_from_mapping(raw)
        assert cfg == PosIntConfig(lam=0.7, eta1=0.3, clamp_lo=-2, clamp_hi=2)
