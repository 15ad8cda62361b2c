import numpy as np
import pytest

from connplan.admm import AdmmParams, feasible_inputs
from connplan.belief import Belief
from connplan.errors import ConfigError, DomainError, InfeasibleMissionError, NumericalError
from connplan.ilqg import NominalPlan, PlanningProblem
from connplan.metric import ConnectivityConfig
from connplan.sim import (MissionSpec, RobotSpec, RolloutBatch, dare_residual, double_integrator_models,
                          lqr_initial_guess, lqr_tracker, mission_tracker, rollout, rollout_batch,
                          run_offline_mission, run_online_mission, validate_connectivity, wilson_interval)


def small_mission(**kw):
    robots = (RobotSpec("a", "primary", (-3.0, 0.0), ((-8.0, 0.0),)),
              RobotSpec("b", "primary", (3.0, 0.0), ((8.0, 2.0),)),
              RobotSpec("c", "bridge", (0.0, 3.0)))
    base = dict(robots=robots, horizon=40, admm=AdmmParams(max_iterations=4, workers=1))
    base.update(kw)
    return MissionSpec(**base)


class TestModels:
    def test_matrices(self):
        m = double_integrator_models(0.2)
        assert m.A[0, 2] == 0.2
        assert m.B[0, 0] == pytest.approx(0.02, abs=1e-17)
        np.testing.assert_array_equal(m.process_cov, m.process_cov.T)
        assert np.linalg.eigvalsh(m.process_cov).min() >= -1e-15
        np.testing.assert_array_equal(m.C, [[1, 0, 0, 0], [0, 1, 0, 0]])
        np.testing.assert_array_equal(m.meas_cov, np.eye(2))

    def test_constant_input_displacement(self):
        m = double_integrator_models(0.2)
        x = np.zeros(4)
        for _ in range(5):
            x = m.A @ x + m.B @ np.array([1.0, 0.0])
        assert x[0] == pytest.approx(0.5 * (5 * 0.2) ** 2, abs=1e-12)
        assert x[2] == pytest.approx(1.0, abs=1e-12)

    def test_bad_dt(self):
        with pytest.raises(DomainError):
            double_integrator_models(0.0)


class TestTracker:
    def test_riccati_fixed_point(self):
        m = double_integrator_models(0.2)
        tr = lqr_tracker(m.A, m.B, np.eye(4), np.eye(2))
        assert dare_residual(m.A, m.B, np.eye(4), np.eye(2), tr.riccati) < 1e-9
        assert np.all(np.abs(np.linalg.eigvals(m.A - m.B @ tr.gain)) < 1.0)
        assert tr.spectral_radius < 1.0

    def test_matches_scipy_dare(self):
        from scipy.linalg import solve_discrete_are
        m = double_integrator_models(0.2)
        Q, R = np.diag([1.0, 1.0, 100.0, 100.0]), 0.01 * np.eye(2)
        tr = lqr_tracker(m.A, m.B, Q, R)
        np.testing.assert_allclose(tr.riccati, solve_discrete_are(m.A, m.B, Q, R), rtol=1e-8)

    def test_iteration_cap(self):
        m = double_integrator_models(0.2)
        with pytest.raises(NumericalError):
            lqr_tracker(m.A, m.B, np.eye(4), np.eye(2), max_iter=2)


class TestMissionSpec:
    def test_defaults(self):
        ms = small_mission()
        cfg = ms.connectivity()
        assert (cfg.delta, cfg.delta0, cfg.epsilon, cfg.delta_conf, cfg.k_c) == (40.0, 35.0, 0.1, 0.997, 0.001)
        assert MissionSpec(ms.robots).horizon == 250 and ms.admm.eta == 2 and ms.admm.gamma == 0.8

    def test_bridge_holds_position(self):
        ms = small_mission()
        np.testing.assert_array_equal(ms.problem().x_des[2], [0.0, 3.0, 0.0, 0.0])

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RobotSpec("x", "bridge", (0, 0), ((1, 1),))
        with pytest.raises(ConfigError):
            RobotSpec("x", "primary", (0, 0))
        with pytest.raises(ConfigError):
            RobotSpec("x", "scout", (0, 0))
        robots = (RobotSpec("a", "primary", (0, 0), ((1, 0), (2, 0))), RobotSpec("b", "bridge", (1, 0)))
        with pytest.raises(ConfigError):
            MissionSpec(robots, mode="offline")
        with pytest.raises(DomainError):
            small_mission(delta0=45.0)


class TestInitialGuess:
    def test_targets_at_start(self):
        robots = (RobotSpec("a", "primary", (0.0, 0.0), ((0.0, 0.0),)),
                  RobotSpec("b", "primary", (4.0, 0.0), ((4.0, 0.0),)))
        p = MissionSpec(robots, horizon=20).problem()
        plan, halvings = lqr_initial_guess(p, ["primary", "primary"])
        assert halvings == 0 and np.all(plan.inputs == 0.0)

    def test_clustered_reaches_targets(self):
        robots = (RobotSpec("a", "primary", (0.0, 0.0), ((6.0, 5.0),)),
                  RobotSpec("b", "primary", (3.0, 2.0), ((-4.0, 6.0),)),
                  RobotSpec("c", "bridge", (1.0, -2.0)))
        p = MissionSpec(robots, horizon=50).problem()
        plan, halvings = lqr_initial_guess(p, ["primary", "primary", "bridge"])
        assert halvings == 0
        for i in range(2):
            assert np.linalg.norm(plan.means[i, -1, :2] - p.x_des[i, :2]) < 0.5
        assert np.all(plan.inputs[2] == 0.0)
        assert np.all(np.linalg.norm(plan.inputs, axis=-1) <= 5.0 + 1e-12)

    def test_bisection_engages(self):
        robots = (RobotSpec("a", "primary", (-5.0, 0.0), ((-60.0, 0.0),)),
                  RobotSpec("b", "primary", (5.0, 0.0), ((60.0, 0.0),)))
        p = MissionSpec(robots, horizon=60).problem()
        plan, halvings = lqr_initial_guess(p, ["primary", "primary"])
        assert halvings >= 1
        assert feasible_inputs(p, plan.inputs)

    def test_hopeless_start(self):
        robots = (RobotSpec("a", "primary", (0.0, 0.0), ((0.0, 0.0),)),
                  RobotSpec("b", "primary", (80.0, 0.0), ((80.0, 0.0),)))
        p = MissionSpec(robots, horizon=5).problem()
        with pytest.raises(InfeasibleMissionError):
            lqr_initial_guess(p, ["primary", "primary"], max_halvings=3)


def noiseless_problem(T=15):
    m = double_integrator_models(0.2, process_intensity=0.0, meas_var=1.0)
    beliefs = [Belief([x, 0.0, 0.0, 0.0], np.zeros((4, 4))) for x in (0.0, 20.0)]
    x_des = np.array([[-3.0, 1.0, 0, 0], [24.0, -1.0, 0, 0]])
    return PlanningProblem([m, m], beliefs, x_des, np.stack([np.diag([1.0, 1, 100, 100])] * 2),
                           np.stack([0.01 * np.eye(2)] * 2), ConnectivityConfig(n_robots=2), T)


class TestRollouts:
    def test_zero_noise_follows_nominal(self):
        p = noiseless_problem()
        plan, _ = lqr_initial_guess(p, ["primary", "primary"])
        tr = lqr_tracker(p.models[0].A, p.models[0].B, np.eye(4), np.eye(2))
        r = rollout(plan, p, 0, tr)
        np.testing.assert_allclose(r.true_states, plan.means, atol=1e-12)
        np.testing.assert_allclose(r.belief_means, plan.means, atol=1e-12)
        d = np.linalg.norm(plan.means[0, :, :2] - plan.means[1, :, :2], axis=-1)
        np.testing.assert_allclose(r.lambda2, np.where(d <= 40.0, 2.0, 0.0), atol=1e-12)

    def test_seed_determinism_and_worker_independence(self):
        ms = small_mission(horizon=20)
        p = ms.problem()
        plan, _ = lqr_initial_guess(p, [r.role for r in ms.robots])
        tr = mission_tracker(ms)
        a = rollout_batch(plan, p, 120, 7, tr, workers=1)
        b = rollout_batch(plan, p, 120, 7, tr, workers=2)
        np.testing.assert_array_equal(a.true_states, b.true_states)
        np.testing.assert_array_equal(a.lambda2, b.lambda2)
        single = rollout(plan, p, 7, tr, index=73)
        np.testing.assert_array_equal(single.true_states, a.true_states[73])
        c = rollout_batch(plan, p, 5, 8, tr, workers=1)
        assert not np.array_equal(c.true_states, a.true_states[:5])

    def test_input_clamp(self):
        ms = small_mission(horizon=20, u_max=0.5)
        p = ms.problem()
        plan, _ = lqr_initial_guess(p, [r.role for r in ms.robots])
        batch = rollout_batch(plan, p, 50, 1, mission_tracker(ms), workers=1)
        assert np.all(batch.max_input <= 0.5 + 1e-12)

    def test_empty_batch(self):
        ms = small_mission(horizon=10)
        p = ms.problem()
        plan, _ = lqr_initial_guess(p, [r.role for r in ms.robots])
        batch = rollout_batch(plan, p, 0, 1, mission_tracker(ms))
        assert len(batch) == 0
        with pytest.raises(DomainError):
            validate_connectivity(batch, 0.997)


def synthetic_batch(lam, nominal, eps=0.1):
    S, T1 = lam.shape
    return RolloutBatch([(0, k) for k in range(S)], np.zeros((S, 2, T1, 4)), np.zeros((S, 2, T1, 4)), lam,
                        nominal, eps, np.zeros(S))


class TestValidation:
    def test_all_above(self):
        s = validate_connectivity(synthetic_batch(np.full((1000, 5), 2.0), np.full(5, 1.0)), 0.997)
        assert s.fraction_below_epsilon == 0.0 and s.passed

    def test_three_in_a_thousand(self):
        lam = np.full((1000, 5), 2.0)
        lam[:3, 2] = 0.05
        s = validate_connectivity(synthetic_batch(lam, np.full(5, 1.0)), 0.997)
        assert s.fraction_below_epsilon == pytest.approx(0.003)
        assert s.min_success_rate == pytest.approx(0.997)
        assert s.margin == pytest.approx(3 * np.sqrt(0.997 * 0.003 / 1000))
        lo, hi = s.success_interval
        assert lo < 0.997 < hi
        assert s.passed_epsilon

    def test_failure_detected(self):
        lam = np.full((1000, 5), 2.0)
        lam[:20, 1] = 0.05
        s = validate_connectivity(synthetic_batch(lam, np.full(5, 1.0)), 0.997)
        assert not s.passed_epsilon and not s.passed

    def test_metric_tie_is_not_a_violation(self):
        nominal = np.full(3, 2.0)
        lam = np.full((10, 3), 2.0 - 4e-16)
        assert not synthetic_batch(lam, nominal).below_metric.any()

    def test_wilson_interval(self):
        lo, hi = wilson_interval(997, 1000)
        assert lo < 0.997 < hi
        assert wilson_interval(0, 0) == (0.0, 1.0)
        lo, hi = wilson_interval(1000, 1000)
        assert hi == 1.0 and lo > 0.98


class TestMissions:
    def test_offline_feasible(self):
        seg = run_offline_mission(small_mission())
        lam = seg.problem.metric(seg.result.plan.means, seg.result.plan.covs).lambda2
        assert np.all(lam > 0.1)
        assert seg.result.trace[-1].best_cost <= seg.result.trace[0].transformed_cost

    def test_online_repeated_targets_need_no_input(self):
        robots = (RobotSpec("a", "primary", (-3.0, 0.0), ((-8.0, 0.0), (-8.0, 0.0))),
                  RobotSpec("b", "primary", (3.0, 0.0), ((8.0, 2.0), (8.0, 2.0))),
                  RobotSpec("c", "bridge", (0.0, 3.0)))
        params = AdmmParams(max_iterations=15, workers=1, stop="time", time_budget_s=25.0, clock="model")
        ms = MissionSpec(robots, mode="online", horizon=60, admm=params)
        res = run_online_mission(ms)
        assert len(res.segments) == 2
        seg2 = res.segments[1]
        p2, plan2 = seg2.problem, seg2.result.plan
        task = sum(p2.task_cost(i, plan2.means[i], plan2.inputs[i]) for i in range(3))
        assert task < 1e-3
        assert res.plan.inputs.shape == (3, 120, 2)
        lam = res.problem.metric(res.plan.means, res.plan.covs).lambda2
        assert np.all(lam > 0.1)
        for seg in res.segments:
            assert seg.result.trace[-1].sim_time_s <= 25.0

    def test_single_segment_online_matches_offline_time_stop(self):
        ms = small_mission(horizon=20, admm=AdmmParams(max_iterations=3, workers=1, clock="model"))
        off = run_offline_mission(ms, params=AdmmParams(max_iterations=3, workers=1, clock="model", stop="time"))
        on = run_online_mission(MissionSpec(ms.robots, mode="online", horizon=20, admm=ms.admm))
        np.testing.assert_array_equal(on.plan.inputs, off.result.plan.inputs)
