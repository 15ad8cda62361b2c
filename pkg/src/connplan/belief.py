"""Motion/sensing models, EKF steps and belief dynamics.

A belief is the Gaussian estimate ``(mean, covariance)`` an on-board EKF
maintains.  ``belief_g`` is the deterministic part of the belief dynamics
(the covariance evolves as if the innovation were zero) and
``belief_noise_scale`` returns the square root of the innovation covariance
that drives the stochastic part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, NumericalError

PSD_TOL = 1e-10
COND_LIMIT = 1e12


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _central_jacobian(fn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = 1e-6 * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.asarray(fn(xp)) - np.asarray(fn(xm))).ravel() / (2.0 * h)
    return jac


class _LinearMotion:
    def __init__(self, A, B):
        self.A, self.B = A, B

    def __call__(self, x, u, w):
        return self.A @ x + self.B @ u + w


class _LinearSensing:
    def __init__(self, C):
        self.C = C

    def __call__(self, x, v):
        return self.C @ x + v


class _Constant:
    def __init__(self, m):
        self.m = m

    def __call__(self, *args):
        return self.m


@dataclass(frozen=True)
class SystemModels:
    """Per-robot motion model ``f(x, u, w)`` and sensing model ``h(x, v)``.

    Jacobians ``F = df/dx`` and ``H = dh/dx`` are taken from ``motion_jacobian``
    / ``sensing_jacobian`` when given, otherwise by central differences.
    Models built with :meth:`linear` carry exact constant Jacobians.
    """

    state_dim: int
    input_dim: int
    motion: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    sensing: Callable[[np.ndarray, np.ndarray], np.ndarray]
    process_cov: np.ndarray
    meas_cov: np.ndarray
    position_indices: tuple
    motion_jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    sensing_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # constant matrices, set only for linear models
    A: Optional[np.ndarray] = field(default=None, repr=False)
    B: Optional[np.ndarray] = field(default=None, repr=False)
    C: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("process_cov", "meas_cov"):
            m = np.array(getattr(self, name), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DomainError(f"{name} must be square")
            if not np.allclose(m, m.T, atol=1e-12):
                raise DomainError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() < -PSD_TOL:
                raise DomainError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)
        if self.process_cov.shape[0] != self.state_dim:
            raise DomainError("process covariance does not match the state dimension")
        pos = tuple(int(i) for i in self.position_indices)
        if len(set(pos)) != len(pos) or any(not 0 <= i < self.state_dim for i in pos):
            raise DomainError(f"invalid position indices {pos}")
        object.__setattr__(self, "position_indices", pos)

    @classmethod
    def linear(cls, A, B, C, Q, R, position_indices: Sequence[int]) -> "SystemModels":
        """``x' = A x + B u + w`` and ``z = C x + v``."""
        A, B, C = (np.array(m, dtype=float) for m in (A, B, C))
        for m in (A, B, C):
            m.setflags(write=False)
        return cls(
            state_dim=A.shape[0],
            input_dim=B.shape[1],
            motion=_LinearMotion(A, B),
            sensing=_LinearSensing(C),
            process_cov=Q,
            meas_cov=R,
            position_indices=tuple(position_indices),
            motion_jacobian=_Constant(A),
            sensing_jacobian=_Constant(C),
            A=A,
            B=B,
            C=C,
        )

    @property
    def is_linear(self) -> bool:
        return self.A is not None

    @property
    def position_dim(self) -> int:
        return len(self.position_indices)

    @property
    def meas_dim(self) -> int:
        return self.meas_cov.shape[0]

    @property
    def belief_dim(self) -> int:
        n = self.state_dim
        return n + n * (n + 1) // 2

    def F(self, x, u) -> np.ndarray:
        if self.motion_jacobian is not None:
            return np.asarray(self.motion_jacobian(x, u), dtype=float)
        w0 = np.zeros(self.state_dim)
        return _central_jacobian(lambda xx: self.motion(xx, u, w0), x)

    def H(self, x) -> np.ndarray:
        if self.sensing_jacobian is not None:
            return np.asarray(self.sensing_jacobian(x), dtype=float)
        v0 = np.zeros(self.meas_dim)
        return _central_jacobian(lambda xx: self.sensing(xx, v0), x)


@dataclass(frozen=True)
class Belief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).ravel()
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
            raise DomainError("covariance is not symmetric")
        if mean.size and np.linalg.eigvalsh(_symmetrize(cov)).min() < -1e-9:
            raise DomainError("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def position(self, position_indices) -> np.ndarray:
        return self.mean[list(position_indices)]

    def position_cov(self, position_indices) -> np.ndarray:
        idx = list(position_indices)
        return self.cov[np.ix_(idx, idx)]

    def to_vector(self) -> np.ndarray:
        """Mean followed by the lower-triangular covariance entries, row-major."""
        rows, cols = np.tril_indices(self.dim)
        return np.concatenate([self.mean, self.cov[rows, cols]])

    @classmethod
    def from_vector(cls, vec, state_dim: int) -> "Belief":
        vec = np.asarray(vec, dtype=float)
        n = state_dim
        if vec.size != n + n * (n + 1) // 2:
            raise DomainError(f"belief vector of length {vec.size} does not match state_dim {n}")
        cov = np.zeros((n, n))
        rows, cols = np.tril_indices(n)
        cov[rows, cols] = vec[n:]
        cov[cols, rows] = vec[n:]
        return cls(vec[:n].copy(), cov)


def tril_coordinates(n: int):
    """``(rows, cols)`` of the covariance entries in belief-vector order."""
    return np.tril_indices(n)


def _check(b: Belief, u, m: SystemModels):
    if b.dim != m.state_dim:
        raise DomainError(f"belief dimension {b.dim} does not match model state_dim {m.state_dim}")
    u = np.asarray(u, dtype=float).ravel()
    if u.size != m.input_dim:
        raise DomainError(f"input of size {u.size} does not match model input_dim {m.input_dim}")
    return u


def ekf_predict(b: Belief, u, m: SystemModels) -> Belief:
    u = _check(b, u, m)
    mean = np.asarray(m.motion(b.mean, u, np.zeros(m.state_dim)), dtype=float)
    F = m.F(b.mean, u)
    cov = _symmetrize(F @ b.cov @ F.T + m.process_cov)
    return Belief(mean, cov)


def kalman_gain(cov_pred: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    S = H @ cov_pred @ H.T + R
    if S.size and np.linalg.cond(S) > COND_LIMIT:
        raise NumericalError("innovation covariance is not invertible")
    return np.linalg.solve(S, H @ cov_pred).T


def _corrected_cov(cov_pred, gain, H):
    return _symmetrize(cov_pred - gain @ H @ cov_pred)


def ekf_correct(b_pred: Belief, z, m: SystemModels) -> Belief:
    z = np.asarray(z, dtype=float).ravel()
    if z.size != m.meas_dim:
        raise DomainError(f"measurement of size {z.size} does not match sensing model ({m.meas_dim})")
    H = m.H(b_pred.mean)
    gain = kalman_gain(b_pred.cov, H, m.meas_cov)
    innovation = z - np.asarray(m.sensing(b_pred.mean, np.zeros(m.meas_dim)), dtype=float)
    return Belief(b_pred.mean + gain @ innovation, _corrected_cov(b_pred.cov, gain, H))


def belief_g(b: Belief, u, m: SystemModels) -> Belief:
    """Deterministic belief propagation: predicted mean, corrected covariance."""
    pred = ekf_predict(b, u, m)
    H = m.H(pred.mean)
    gain = kalman_gain(pred.cov, H, m.meas_cov)
    return Belief(pred.mean, _corrected_cov(pred.cov, gain, H))


def psd_sqrt(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Factor ``W`` with ``W @ W.T == m`` for a symmetric PSD ``m``.

    Cholesky first; falls back to an eigendecomposition with small negative
    eigenvalues clamped to zero.
    """
    m = _symmetrize(np.asarray(m, dtype=float))
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(m)
    if w.min(initial=0.0) < -tol * max(1.0, np.abs(w).max(initial=0.0)):
        raise NumericalError(f"matrix is indefinite (min eigenvalue {w.min():.3g})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def belief_noise_scale(b: Belief, u, m: SystemModels) -> np.ndarray:
    pred = ekf_predict(b, u, m)
    H = m.H(pred.mean)
    gain = kalman_gain(pred.cov, H, m.meas_cov)
    return psd_sqrt(gain @ H @ pred.cov)


def sample_belief_step(b: Belief, u, m: SystemModels, rng: np.random.Generator) -> Belief:
    """One draw of the stochastic belief dynamics; only the mean is perturbed."""
    nxt = belief_g(b, u, m)
    W = belief_noise_scale(b, u, m)
    return Belief(nxt.mean + W @ rng.standard_normal(W.shape[1]), nxt.cov)


def propagate(b0: Belief, inputs, m: SystemModels) -> list:
    """Nominal belief sequence ``b[t+1] = g(b[t], u[t])`` for ``t < len(inputs)``."""
    out = [b0]
    for u in np.asarray(inputs, dtype=float):
        out.append(belief_g(out[-1], u, m))
    return out


def covariance_sequence(cov0: np.ndarray, steps: int, m: SystemModels) -> np.ndarray:
    """Input-independent covariance sequence of a linear model, shape ``(steps+1, n, n)``."""
    if not m.is_linear:
        raise DomainError("covariance_sequence requires a linear model")
    A, C = m.A, m.C
    out = np.empty((steps + 1,) + cov0.shape)
    out[0] = cov0
    for t in range(steps):
        pred = _symmetrize(A @ out[t] @ A.T + m.process_cov)
        gain = kalman_gain(pred, C, m.meas_cov)
        out[t + 1] = _corrected_cov(pred, gain, C)
    return out
