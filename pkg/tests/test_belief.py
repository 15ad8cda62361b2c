import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_psd
from connplan.belief import (Belief, SystemModels, belief_g, belief_noise_scale, covariance_sequence, ekf_correct,
                             ekf_predict, kalman_gain, propagate, psd_sqrt, sample_belief_step)
from connplan.errors import DomainError, NumericalError


def kalman_closed_form(x, P, u, z, A, B, C, Q, R):
    """Textbook linear Kalman filter step."""
    xp = A @ x + B @ u
    Pp = A @ P @ A.T + Q
    K = Pp @ C.T @ np.linalg.inv(C @ Pp @ C.T + R)
    return xp + K @ (z - C @ xp), (np.eye(len(x)) - K @ C) @ Pp


def scalar_model(a=1.0, c=1.0, q=0.0, r=1.0):
    return SystemModels.linear([[a]], [[1.0]], [[c]], [[q]], [[r]], (0,))


class TestBeliefType:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        b = Belief(rng.standard_normal(4), random_psd(rng, 4))
        v = b.to_vector()
        assert v.shape == (14,)
        b2 = Belief.from_vector(v, 4)
        np.testing.assert_array_equal(b2.mean, b.mean)
        np.testing.assert_array_equal(b2.cov, b.cov)
        np.testing.assert_array_equal(b2.to_vector(), v)

    def test_vector_layout(self):
        cov = np.array([[1.0, 2.0], [2.0, 5.0]])
        np.testing.assert_array_equal(Belief([7.0, 8.0], cov).to_vector(), [7, 8, 1, 2, 5])

    def test_rejects_bad_covariance(self):
        with pytest.raises(DomainError):
            Belief([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(DomainError):
            Belief([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])


class TestEkf:
    def test_identity_predict(self):
        m = SystemModels.linear(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), (0, 1))
        b = ekf_predict(Belief([1.0, 2.0], np.eye(2)), [0.0, 0.0], m)
        np.testing.assert_array_equal(b.cov, np.eye(2))

    def test_double_integrator_predict(self, di, sigma_init):
        b = ekf_predict(Belief(np.zeros(4), sigma_init), [0.0, 0.0], di)
        np.testing.assert_array_equal(b.mean, np.zeros(4))
        np.testing.assert_allclose(b.cov, di.A @ sigma_init @ di.A.T + di.process_cov, atol=1e-15)

    def test_orthogonal_predict_preserves_spectrum(self):
        th = 0.3
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        m = SystemModels.linear(rot, np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), (0, 1))
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        b = ekf_predict(Belief([0.0, 0.0], cov), [0.0, 0.0], m)
        np.testing.assert_allclose(np.linalg.eigvalsh(b.cov), np.linalg.eigvalsh(cov), atol=1e-12)

    def test_huge_noise_keeps_prior(self, di):
        m = SystemModels.linear(di.A, di.B, di.C, di.process_cov, 1e12 * np.eye(2), (0, 1))
        prior = Belief(np.ones(4), np.eye(4))
        post = ekf_correct(prior, [5.0, -5.0], m)
        np.testing.assert_allclose(post.cov, prior.cov, atol=1e-10)
        np.testing.assert_allclose(post.mean, prior.mean, atol=1e-10)

    def test_half_gain_on_position_block(self, di):
        gain = kalman_gain(np.eye(4), di.C, np.eye(2))
        np.testing.assert_allclose(gain[:2], 0.5 * np.eye(2), atol=1e-15)
        np.testing.assert_allclose(gain[2:], 0.0, atol=1e-15)

    def test_zero_innovation(self, di):
        prior = Belief(np.array([1.0, 2.0, 3.0, 4.0]), np.eye(4))
        post = ekf_correct(prior, [1.0, 2.0], di)
        np.testing.assert_allclose(post.mean, prior.mean, atol=1e-15)

    def test_singular_innovation(self):
        m = SystemModels.linear(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), (0, 1))
        with pytest.raises(NumericalError):
            ekf_correct(Belief([0.0, 0.0], np.zeros((2, 2))), [0.0, 0.0], m)

    def test_dimension_errors(self, di):
        with pytest.raises(DomainError):
            ekf_predict(Belief([0.0, 0.0], np.eye(2)), [0.0, 0.0], di)
        with pytest.raises(DomainError):
            ekf_predict(Belief(np.zeros(4), np.eye(4)), [0.0], di)
        with pytest.raises(DomainError):
            ekf_correct(Belief(np.zeros(4), np.eye(4)), [0.0, 0.0, 0.0], di)

    @given(st.integers(0, 2**32 - 1))
    def test_matches_closed_form_kalman(self, seed):
        rng = np.random.default_rng(seed)
        n, p = 4, 2
        A = np.eye(n) + 0.2 * rng.standard_normal((n, n))
        B = rng.standard_normal((n, 2))
        C = rng.standard_normal((p, n))
        Q, R = random_psd(rng, n), random_psd(rng, p, 0.5, 2.0)
        m = SystemModels.linear(A, B, C, Q, R, (0, 1))
        b = Belief(rng.standard_normal(n), random_psd(rng, n))
        u, z = rng.standard_normal(2), rng.standard_normal(p)
        post = ekf_correct(ekf_predict(b, u, m), z, m)
        x_ref, P_ref = kalman_closed_form(b.mean, b.cov, u, z, A, B, C, Q, R)
        np.testing.assert_allclose(post.mean, x_ref, atol=1e-10)
        np.testing.assert_allclose(post.cov, P_ref, atol=1e-10)

    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_psd_preserved(self, seed):
        rng = np.random.default_rng(seed)
        m = SystemModels.linear(np.eye(3) + 0.3 * rng.standard_normal((3, 3)), np.eye(3),
                                rng.standard_normal((2, 3)), random_psd(rng, 3), random_psd(rng, 2), (0, 1))
        b = Belief(rng.standard_normal(3), random_psd(rng, 3))
        for nxt in (ekf_predict(b, np.zeros(3), m), belief_g(b, np.zeros(3), m),
                    ekf_correct(ekf_predict(b, np.zeros(3), m), np.zeros(2), m)):
            assert np.array_equal(nxt.cov, nxt.cov.T)
            assert np.linalg.eigvalsh(nxt.cov).min() >= -1e-9

    def test_nonlinear_model_uses_finite_differences(self):
        m = SystemModels(2, 1, lambda x, u, w: np.array([np.sin(x[0]) + u[0], x[1]]) + w,
                         lambda x, v: np.array([x[0] ** 2]) + v, np.eye(2) * 0.01, np.eye(1), (0,))
        x = np.array([0.4, 1.0])
        np.testing.assert_allclose(m.F(x, [0.0]), [[np.cos(0.4), 0], [0, 1]], atol=1e-8)
        np.testing.assert_allclose(m.H(x), [[0.8, 0]], atol=1e-8)


class TestBeliefDynamics:
    def test_covariance_settles(self, di, sigma_init):
        # oracle: fixed point of the covariance recursion, iterated far past the horizon
        P = covariance_sequence(sigma_init, 3000, di)[-1]
        seq = propagate(Belief(np.zeros(4), sigma_init), np.zeros((10, 2)), di)
        dist = np.array([np.linalg.norm(b.cov - P) for b in seq])
        assert np.all(np.diff(dist[3:]) < 0)
        np.testing.assert_allclose(covariance_sequence(P, 1, di)[-1], P, atol=1e-12)

    def test_no_sensing_reduces_to_predict(self, di, sigma_init):
        m = SystemModels.linear(di.A, di.B, np.zeros((2, 4)), di.process_cov, np.eye(2), (0, 1))
        b = Belief(np.ones(4), sigma_init)
        np.testing.assert_allclose(belief_g(b, [1.0, 0.0], m).cov, ekf_predict(b, [1.0, 0.0], m).cov)

    def test_perfect_measurement(self):
        m = SystemModels.linear(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2)), 1e-10 * np.eye(2), (0, 1))
        assert np.max(np.abs(belief_g(Belief([0.0, 0.0], np.eye(2)), [0.0, 0.0], m).cov)) < 1e-9

    def test_sequence_matches_g(self, di, sigma_init):
        seq = propagate(Belief(np.zeros(4), sigma_init), np.zeros((5, 2)), di)
        np.testing.assert_allclose(covariance_sequence(sigma_init, 5, di), np.stack([b.cov for b in seq]),
                                   atol=1e-15)


class TestNoiseScale:
    def test_no_sensing_zero(self, di, sigma_init):
        m = SystemModels.linear(di.A, di.B, np.zeros((2, 4)), di.process_cov, np.eye(2), (0, 1))
        np.testing.assert_allclose(belief_noise_scale(Belief(np.zeros(4), sigma_init), [0.0, 0.0], m), 0.0)

    def test_scalar(self):
        m = scalar_model(a=1.0, c=1.0, q=0.0, r=1.0)
        b = Belief([0.0], [[1.0]])  # L = 0.5, L H Sigma = 0.5
        np.testing.assert_allclose(belief_noise_scale(b, [0.0], m), [[np.sqrt(0.5)]])
        np.testing.assert_allclose(psd_sqrt(np.array([[0.25]])), [[0.5]])

    def test_reproduces_product(self, di, sigma_init):
        b = Belief(np.zeros(4), sigma_init)
        W = belief_noise_scale(b, [0.0, 0.0], di)
        pred = ekf_predict(b, [0.0, 0.0], di)
        L = kalman_gain(pred.cov, di.C, di.meas_cov)
        target = L @ di.C @ pred.cov
        np.testing.assert_allclose(W @ W.T, 0.5 * (target + target.T), atol=1e-10)

    def test_indefinite_rejected(self):
        with pytest.raises(NumericalError):
            psd_sqrt(np.diag([1.0, -0.5]))
        W = psd_sqrt(np.diag([1.0, -1e-12]))
        np.testing.assert_allclose(W @ W.T, np.diag([1.0, 0.0]), atol=1e-12)

    def test_sampling_perturbs_only_the_mean(self, di, sigma_init):
        b = Belief(np.zeros(4), sigma_init)
        nxt = sample_belief_step(b, [0.0, 0.0], di, np.random.default_rng(0))
        np.testing.assert_array_equal(nxt.cov, belief_g(b, [0.0, 0.0], di).cov)
        assert np.any(nxt.mean != 0.0)


def test_monte_carlo_consistency(di, sigma_init):
    """Empirical state-error covariance of 5000 filtered runs matches the filter covariance."""
    rng = np.random.default_rng(11)
    runs, steps = 5000, 30
    LQ = np.linalg.cholesky(di.process_cov + 1e-300 * np.eye(4))
    x = rng.multivariate_normal(np.zeros(4), sigma_init, size=runs)
    xhat = np.zeros((runs, 4))
    covs = covariance_sequence(sigma_init, steps, di)
    for t in range(steps):
        x = x @ di.A.T + rng.standard_normal((runs, 4)) @ LQ.T
        z = x @ di.C.T + rng.standard_normal((runs, 2))
        pred = xhat @ di.A.T
        Pp = di.A @ covs[t] @ di.A.T + di.process_cov
        K = kalman_gain(Pp, di.C, di.meas_cov)
        xhat = pred + (z - pred @ di.C.T) @ K.T
    err = x - xhat
    emp = np.cov(err.T)
    assert abs(np.trace(emp) - np.trace(covs[-1])) <= 0.15 * np.trace(covs[-1])
