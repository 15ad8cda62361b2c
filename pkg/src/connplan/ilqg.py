"""Belief-space iLQG for the per-robot ADMM subproblem.

The subproblem optimises the inputs of a subset ``V`` of robots while every
other robot stays frozen on the consensus trajectory.  Its stage cost is

    sum_{j in V} J_j,t  +  (|V|/N) * J^c_t  +  y_t.(u_t - ubar_t)  +  rho/2 |u_t - ubar_t|^2

where ``J^c_t`` is the connectivity barrier evaluated on the *whole* system.
The barrier Hessian is replaced by the rank-1 term ``J''(lambda) a a^T``
(``a`` = metric gradient), so quadratizing a trajectory costs one metric
evaluation per timestep.

For linear motion/sensing models the covariance sequence does not depend on
the inputs, so covariance deviations stay identically zero and the backward
pass runs on the mean coordinates only ("reduced" mode).  Nonlinear models
use the full belief vector with finite-difference belief Jacobians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metric as mt
from .belief import Belief, SystemModels, belief_g, covariance_sequence
from .errors import BarrierViolation, DomainError, GradientUndefinedError, NumericalError

log = logging.getLogger(__name__)

LINE_SEARCH_STEPS = (1.0, 0.5, 0.25, 0.125, 0.0625)
MU_INIT, MU_MIN, MU_MAX = 1e-6, 1e-9, 1e3
QUU_MIN_EIG = 1e-6
FD_STEP = 1e-6


@dataclass
class PlanningProblem:
    """Everything needed to evaluate a joint plan for ``N`` robots over ``T`` steps."""

    models: Sequence[SystemModels]
    init_beliefs: Sequence[Belief]
    x_des: np.ndarray  # (N, n)
    Wx: np.ndarray  # (N, n, n) terminal state weights
    Wu: np.ndarray  # (N, m, m) input weights
    cfg: mt.ConnectivityConfig
    horizon: int
    u_max: Optional[float] = 5.0
    _cov_cache: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.models = tuple(self.models)
        self.init_beliefs = tuple(self.init_beliefs)
        N = len(self.models)
        if len(self.init_beliefs) != N:
            raise DomainError("one initial belief per robot is required")
        if N != self.cfg.n_robots:
            raise DomainError(f"connectivity config is for {self.cfg.n_robots} robots, problem has {N}")
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        self.x_des = np.asarray(self.x_des, dtype=float)
        self.Wx = np.asarray(self.Wx, dtype=float)
        self.Wu = np.asarray(self.Wu, dtype=float)
        pos = {m.position_indices for m in self.models}
        if len(pos) != 1:
            raise DomainError("all robots must share one position index map")

    @property
    def n_robots(self) -> int:
        return len(self.models)

    @property
    def state_dim(self) -> int:
        return self.models[0].state_dim

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    @property
    def position_indices(self) -> tuple:
        return self.models[0].position_indices

    @property
    def linear(self) -> bool:
        return all(m.is_linear for m in self.models)

    def covariances(self) -> np.ndarray:
        """``(N, T+1, n, n)`` covariance sequence for linear models (cached)."""
        if self._cov_cache is None:
            self._cov_cache = np.stack([
                covariance_sequence(b.cov, self.horizon, m) for b, m in zip(self.init_beliefs, self.models)
            ])
        return self._cov_cache

    def clamp(self, u: np.ndarray) -> np.ndarray:
        if self.u_max is None:
            return u
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        factor = np.where(norm > self.u_max, self.u_max / np.where(norm > 0, norm, 1.0), 1.0)
        return u * factor

    def propagate(self, inputs: np.ndarray, robots: Optional[Sequence[int]] = None):
        """Nominal means ``(k, T+1, n)`` and covariances ``(k, T+1, n, n)`` for ``robots``."""
        inputs = np.asarray(inputs, dtype=float)
        robots = range(self.n_robots) if robots is None else robots
        T = self.horizon
        means = np.empty((len(robots), T + 1, self.state_dim))
        covs = np.empty((len(robots), T + 1, self.state_dim, self.state_dim))
        for r, i in enumerate(robots):
            m = self.models[i]
            if m.is_linear:
                x = self.init_beliefs[i].mean.copy()
                means[r, 0] = x
                for t in range(T):
                    x = m.A @ x + m.B @ inputs[r, t]
                    means[r, t + 1] = x
                covs[r] = self.covariances()[i]
            else:
                b = self.init_beliefs[i]
                means[r, 0], covs[r, 0] = b.mean, b.cov
                for t in range(T):
                    b = belief_g(b, inputs[r, t], m)
                    means[r, t + 1], covs[r, t + 1] = b.mean, b.cov
        return means, covs

    def metric(self, means: np.ndarray, covs: np.ndarray, counter=None, tag="default") -> mt.BatchEvaluation:
        """Metric at every timestep of a joint ``(N, T+1, ...)`` trajectory."""
        idx = list(self.position_indices)
        pos = np.swapaxes(means[:, :, idx], 0, 1)
        pcov = np.swapaxes(covs[:, :, idx][:, :, :, idx], 0, 1)
        return mt.evaluate_batch(pos, pcov, self.cfg, counter, tag)

    def task_cost(self, i: int, means_i: np.ndarray, inputs_i: np.ndarray) -> float:
        """Terminal state cost plus summed input cost of robot ``i``."""
        e = means_i[-1] - self.x_des[i]
        return float(e @ self.Wx[i] @ e + np.einsum("ti,ij,tj->", inputs_i, self.Wu[i], inputs_i))


@dataclass
class NominalPlan:
    """Joint nominal inputs with the beliefs they induce."""

    inputs: np.ndarray  # (N, T, m)
    means: np.ndarray  # (N, T+1, n)
    covs: np.ndarray  # (N, T+1, n, n)

    @classmethod
    def from_inputs(cls, problem: PlanningProblem, inputs) -> "NominalPlan":
        inputs = np.array(inputs, dtype=float)
        expected = (problem.n_robots, problem.horizon, problem.input_dim)
        if inputs.shape != expected:
            raise DomainError(f"inputs have shape {inputs.shape}, expected {expected}")
        means, covs = problem.propagate(inputs)
        return cls(inputs, means, covs)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    def beliefs(self, i: int) -> list:
        return [Belief(self.means[i, t], self.covs[i, t]) for t in range(self.means.shape[1])]


@dataclass
class AugmentedCostTerms:
    """Dual rows ``y`` and consensus rows ``ubar`` for the subset, shape ``(|V|, T, m)``."""

    dual: np.ndarray
    consensus: np.ndarray
    rho: float

    def __post_init__(self):
        if self.rho <= 0:
            raise DomainError("rho must be positive")
        self.dual = np.asarray(self.dual, dtype=float)
        self.consensus = np.asarray(self.consensus, dtype=float)


@dataclass
class QuadraticCostSlice:
    c_bb: np.ndarray
    c_bu: np.ndarray
    c_uu: np.ndarray
    c_b: np.ndarray
    c_u: np.ndarray
    c0: float


def transformed_cost(problem: PlanningProblem, plan: NominalPlan, counter=None) -> float:
    """Task costs of all robots plus the barrier summed over every timestep."""
    ev = problem.metric(plan.means, plan.covs, counter, "transformed_cost")
    task = sum(problem.task_cost(i, plan.means[i], plan.inputs[i]) for i in range(problem.n_robots))
    return task + float(np.sum(mt.connectivity_cost(ev.lambda2, problem.cfg)))


def _stage_costs(problem, subset, means, inputs, lam, aug: AugmentedCostTerms):
    """Per-timestep subset cost ``c_t`` for ``t = 0..T`` (inputs/means of the subset only)."""
    T = problem.horizon
    N = problem.n_robots
    c = (len(subset) / N) * mt.connectivity_cost(lam, problem.cfg)
    c = np.array(c, dtype=float)
    for r, i in enumerate(subset):
        u = inputs[r]
        c[:T] += np.einsum("ti,ij,tj->t", u, problem.Wu[i], u)
        e = means[r, T] - problem.x_des[i]
        c[T] += e @ problem.Wx[i] @ e
        d = u - aug.consensus[r]
        c[:T] += np.sum(aug.dual[r] * d, axis=1) + 0.5 * aug.rho * np.sum(d * d, axis=1)
    return c


def _joint(problem, base: NominalPlan, subset, means_s, covs_s):
    means = base.means.copy()
    covs = base.covs.copy()
    means[list(subset)] = means_s
    covs[list(subset)] = covs_s
    return means, covs


def subset_cost(problem: PlanningProblem, base: NominalPlan, subset, inputs_s, aug: AugmentedCostTerms,
                t: Optional[int] = None, counter=None):
    """Augmented subset cost, either at timestep ``t`` or summed over the horizon.

    ``base`` supplies the frozen trajectories of robots outside ``subset``.
    Raises :class:`BarrierViolation` when the joint trajectory leaves the
    feasible region.
    """
    inputs_s = np.asarray(inputs_s, dtype=float)
    means_s, covs_s = problem.propagate(inputs_s, subset)
    means, covs = _joint(problem, base, subset, means_s, covs_s)
    ev = problem.metric(means, covs, counter, "cost")
    c = _stage_costs(problem, subset, means_s, inputs_s, ev.lambda2, aug)
    return float(c[t]) if t is not None else float(np.sum(c))


@dataclass
class _Trajectory:
    inputs: np.ndarray  # (k, T, m)
    means: np.ndarray  # (k, T+1, n)
    covs: np.ndarray  # (k, T+1, n, n)
    eval: mt.BatchEvaluation
    stage: np.ndarray  # (T+1,)

    @property
    def cost(self) -> float:
        return float(np.sum(self.stage))


class _SubsetSolver:
    def __init__(self, problem: PlanningProblem, base: NominalPlan, subset, aug: AugmentedCostTerms,
                 counter: Optional[mt.EvalCounter], reduced: Optional[bool]):
        self.p = problem
        self.base = base
        self.subset = list(subset)
        self.aug = aug
        self.counter = counter
        self.reduced = problem.linear if reduced is None else reduced
        if self.reduced and not problem.linear:
            raise DomainError("reduced mode requires linear models")
        n = problem.state_dim
        self.nb = n if self.reduced else problem.models[0].belief_dim
        self.fd_fallbacks = 0

    # --- state vectors -------------------------------------------------
    def _vec(self, means, covs, t):
        if self.reduced:
            return means[:, t].ravel()
        return np.concatenate([Belief(means[r, t], covs[r, t]).to_vector() for r in range(means.shape[0])])

    def evaluate(self, inputs, tag) -> _Trajectory:
        means_s, covs_s = self.p.propagate(inputs, self.subset)
        means, covs = _joint(self.p, self.base, self.subset, means_s, covs_s)
        ev = self.p.metric(means, covs, self.counter, tag)
        stage = _stage_costs(self.p, self.subset, means_s, inputs, ev.lambda2, self.aug)
        return _Trajectory(inputs, means_s, covs_s, ev, stage)

    # --- dynamics --------------------------------------------------------
    def dynamics_jacobians(self, traj: _Trajectory, t):
        k, m = len(self.subset), self.p.input_dim
        A = np.zeros((k * self.nb, k * self.nb))
        Bm = np.zeros((k * self.nb, k * m))
        for r, i in enumerate(self.subset):
            mod = self.p.models[i]
            rs = slice(r * self.nb, (r + 1) * self.nb)
            if self.reduced:
                A[rs, rs] = mod.A
                Bm[rs, r * m:(r + 1) * m] = mod.B
            else:
                a, b = _belief_jacobians(Belief(traj.means[r, t], traj.covs[r, t]), traj.inputs[r, t], mod)
                A[rs, rs] = a
                Bm[rs, r * m:(r + 1) * m] = b
        return A, Bm

    # --- quadratization --------------------------------------------------
    def metric_gradients(self, traj: _Trajectory):
        """``(T+1, |V|*nb)`` gradient of lambda2 over the active coordinates."""
        p = self.p
        ev = traj.eval
        d_pos, d_cov = mt.gradient_batch(ev, p.cfg, check=False)
        n = p.state_dim
        grads = np.zeros((p.horizon + 1, len(self.subset), self.nb))
        for r, i in enumerate(self.subset):
            if self.reduced:
                grads[:, r, list(p.position_indices)] = d_pos[:, i]
            else:
                grads[:, r] = mt.to_belief_gradient(d_pos[:, i], d_cov[:, i], n, p.position_indices)
        slope = mt.spectral.smooth_edge_weight_slope(ev.lbar, p.cfg.delta0, p.cfg.delta)
        idx = np.arange(p.n_robots)
        slope[:, idx, idx] = 0.0
        active = slope != 0.0
        # with no edge in the transition band the gradient is exactly zero even
        # when lambda2 is repeated, so no fallback is needed
        bad = (ev.degenerate & np.any(active, axis=(1, 2))) | np.any(
            active & (ev.dist < mt.COINCIDENT_TOL), axis=(1, 2))
        cov_bad = np.zeros_like(bad) if self.reduced else (
            np.any(ev.cov_repeated[:, self.subset], axis=1) & np.any(active, axis=(1, 2)))
        for t in np.nonzero(bad | cov_bad)[0]:
            grads[t] = self._fd_gradient(traj, t, cov_only=not bad[t])
        return grads.reshape(p.horizon + 1, -1)

    def _fd_gradient(self, traj: _Trajectory, t, cov_only: bool):
        """Central-difference fallback where the analytic gradient is undefined."""
        p = self.p
        n = p.state_dim
        means, covs = _joint(p, self.base, self.subset, traj.means, traj.covs)
        grads = np.zeros((len(self.subset), self.nb))
        coords = range(n, self.nb) if cov_only else range(self.nb)
        if cov_only:
            d_pos, d_cov = mt.gradient_batch(
                mt.evaluate_batch(*self._positions(means[:, t:t + 1], covs[:, t:t + 1]), p.cfg), p.cfg, check=False)
            for r, i in enumerate(self.subset):
                grads[r] = mt.to_belief_gradient(d_pos[0, i], d_cov[0, i], n, p.position_indices)
        for r, i in enumerate(self.subset):
            vec = self._vec(traj.means[r:r + 1], traj.covs[r:r + 1], t)
            pm, pc = [], []
            for c in coords:
                for sign in (1.0, -1.0):
                    v = vec.copy()
                    v[c] += sign * FD_STEP
                    mm, cc = means[:, t].copy(), covs[:, t].copy()
                    if self.reduced:
                        mm[i] = v
                    else:
                        b = Belief.from_vector(v, n)
                        mm[i], cc[i] = b.mean, b.cov
                    pm.append(mm)
                    pc.append(cc)
            ev = mt.evaluate_batch(*self._positions(np.stack(pm, axis=1), np.stack(pc, axis=1)), p.cfg,
                                   self.counter, "fd_fallback")
            lam = ev.lambda2.reshape(-1, 2)
            grads[r, list(coords)] = (lam[:, 0] - lam[:, 1]) / (2.0 * FD_STEP)
        self.fd_fallbacks += 1
        return grads

    def _positions(self, means, covs):
        idx = list(self.p.position_indices)
        return np.swapaxes(means[:, :, idx], 0, 1), np.swapaxes(covs[:, :, idx][:, :, :, idx], 0, 1)

    def quadratize(self, traj: _Trajectory) -> list:
        p, aug = self.p, self.aug
        T, m, k = p.horizon, p.input_dim, len(self.subset)
        share = k / p.n_robots
        J, J_l, J_ll = mt.barrier_derivatives(traj.eval.lambda2, p.cfg)
        a = self.metric_gradients(traj)
        slices = []
        for t in range(T + 1):
            c_bb = share * J_ll[t] * np.outer(a[t], a[t])
            c_b = share * J_l[t] * a[t]
            c_uu = np.zeros((k * m, k * m))
            c_u = np.zeros(k * m)
            for r, i in enumerate(self.subset):
                ms = slice(r * m, (r + 1) * m)
                bs = slice(r * self.nb, r * self.nb + p.state_dim)
                if t < T:
                    u = traj.inputs[r, t]
                    c_uu[ms, ms] = 2.0 * p.Wu[i] + aug.rho * np.eye(m)
                    c_u[ms] = 2.0 * p.Wu[i] @ u + aug.dual[r, t] + aug.rho * (u - aug.consensus[r, t])
                else:
                    c_bb[bs, bs] += 2.0 * p.Wx[i]
                    c_b[bs] += 2.0 * p.Wx[i] @ (traj.means[r, T] - p.x_des[i])
            slices.append(QuadraticCostSlice(c_bb, np.zeros((k * m, k * self.nb)), c_uu, c_b, c_u,
                                             float(traj.stage[t])))
        return slices

    # --- backward / forward ----------------------------------------------
    def backward(self, traj: _Trajectory, q: list, mu: float):
        T = self.p.horizon
        V = q[T].c_bb.copy()
        v = q[T].c_b.copy()
        ks, Ks = [None] * T, [None] * T
        for t in range(T - 1, -1, -1):
            A, Bm = self.dynamics_jacobians(traj, t)
            Qx = q[t].c_b + A.T @ v
            Qu = q[t].c_u + Bm.T @ v
            Qxx = q[t].c_bb + A.T @ V @ A
            Quu = q[t].c_uu + Bm.T @ V @ Bm
            Qux = q[t].c_bu + Bm.T @ V @ A
            Quu_reg = 0.5 * (Quu + Quu.T) + mu * np.eye(Quu.shape[0])
            if np.linalg.eigvalsh(Quu_reg).min() < QUU_MIN_EIG:
                return None
            kk = -np.linalg.solve(Quu_reg, Qu)
            KK = -np.linalg.solve(Quu_reg, Qux)
            if not (np.all(np.isfinite(kk)) and np.all(np.isfinite(KK))):
                return None
            v = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
            V = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
            V = 0.5 * (V + V.T)
            ks[t], Ks[t] = kk, KK
        return ks, Ks

    def forward(self, traj: _Trajectory, ks, Ks, alpha) -> np.ndarray:
        p = self.p
        T, m, k = p.horizon, p.input_dim, len(self.subset)
        new = np.empty_like(traj.inputs)
        if self.reduced:
            x = traj.means[:, 0].copy()
            for t in range(T):
                dx = (x - traj.means[:, t]).ravel()
                du = alpha * ks[t] + Ks[t] @ dx
                u = p.clamp(traj.inputs[:, t] + du.reshape(k, m))
                new[:, t] = u
                for r, i in enumerate(self.subset):
                    x[r] = p.models[i].A @ x[r] + p.models[i].B @ u[r]
            return new
        beliefs = [Belief(traj.means[r, 0], traj.covs[r, 0]) for r in range(k)]
        for t in range(T):
            dx = np.concatenate([beliefs[r].to_vector() for r in range(k)]) - self._vec(traj.means, traj.covs, t)
            du = alpha * ks[t] + Ks[t] @ dx
            u = p.clamp(traj.inputs[:, t] + du.reshape(k, m))
            new[:, t] = u
            beliefs = [belief_g(beliefs[r], u[r], p.models[i]) for r, i in enumerate(self.subset)]
        return new


def _belief_jacobians(b: Belief, u, m: SystemModels):
    """Central-difference Jacobians of the belief-vector map ``g`` w.r.t. belief and input."""
    n = m.state_dim
    vec = b.to_vector()

    def g_of_b(v):
        return belief_g(Belief.from_vector(v, n), u, m).to_vector()

    def g_of_u(uu):
        return belief_g(b, uu, m).to_vector()

    jb = np.empty((vec.size, vec.size))
    for c in range(vec.size):
        h = FD_STEP * max(1.0, abs(vec[c]))
        vp, vm = vec.copy(), vec.copy()
        vp[c] += h
        vm[c] -= h
        jb[:, c] = (g_of_b(vp) - g_of_b(vm)) / (2 * h)
    u = np.asarray(u, dtype=float)
    ju = np.empty((vec.size, u.size))
    for c in range(u.size):
        h = FD_STEP * max(1.0, abs(u[c]))
        up, um = u.copy(), u.copy()
        up[c] += h
        um[c] -= h
        ju[:, c] = (g_of_u(up) - g_of_u(um)) / (2 * h)
    return jb, ju


def quadratize(problem: PlanningProblem, base: NominalPlan, subset, inputs_s, aug: AugmentedCostTerms,
               counter=None, reduced: Optional[bool] = None) -> list:
    """Quadratic model of the subset cost at every timestep along ``inputs_s``."""
    solver = _SubsetSolver(problem, base, subset, aug, counter, reduced)
    traj = solver.evaluate(np.asarray(inputs_s, dtype=float), "quadratize")
    return solver.quadratize(traj)


@dataclass
class SolveResult:
    inputs: np.ndarray  # (|V|, T, m)
    cost_before: float
    cost_after: float
    iterations: int
    accepted: int
    improved: bool
    fd_fallbacks: int = 0
    counter: Optional[mt.EvalCounter] = None
    lambda_min: list = field(default_factory=list)


def ilqg_solve(problem: PlanningProblem, base: NominalPlan, subset, aug: AugmentedCostTerms, budget: int = 3,
               counter: Optional[mt.EvalCounter] = None, reduced: Optional[bool] = None,
               init_inputs: Optional[np.ndarray] = None) -> SolveResult:
    """Locally optimise the inputs of ``subset`` with the rest of ``base`` frozen.

    The starting point is the subset's rows of ``base`` (or ``init_inputs``)
    and must keep the metric above epsilon.  Every accepted iterate lowers the
    augmented cost and stays feasible; if no step is accepted the start is
    returned unchanged.
    """
    subset = list(subset)
    counter = counter if counter is not None else mt.EvalCounter()
    solver = _SubsetSolver(problem, base, subset, aug, counter, reduced)
    start = base.inputs[subset] if init_inputs is None else np.asarray(init_inputs, dtype=float)
    try:
        traj = solver.evaluate(start.copy(), "line_search")
    except BarrierViolation as exc:
        raise DomainError(f"initial subset trajectory is infeasible: {exc}") from exc
    cost0 = traj.cost
    mu = MU_INIT
    accepted = 0
    lam_min = [float(traj.eval.lambda2.min())]
    it = 0
    for it in range(1, budget + 1):
        # fresh metric evaluation at the current nominal: T+1 evaluations
        traj = solver.evaluate(traj.inputs, "quadratize")
        q = solver.quadratize(traj)
        gains = None
        while gains is None:
            gains = solver.backward(traj, q, mu)
            if gains is None:
                if mu >= MU_MAX:
                    raise NumericalError("backward pass failed at maximum regularisation")
                mu = min(mu * 10.0, MU_MAX)
        ks, Ks = gains
        step = None
        for alpha in LINE_SEARCH_STEPS:
            cand = solver.forward(traj, ks, Ks, alpha)
            try:
                trial = solver.evaluate(cand, "line_search")
            except BarrierViolation:
                continue
            if trial.cost < traj.cost:
                step = trial
                break
        if step is None:
            mu = min(mu * 10.0, MU_MAX)
            log.debug("ilqg: no descent step at iteration %d (mu=%g)", it, mu)
            continue
        improvement = traj.cost - step.cost
        traj = step
        accepted += 1
        lam_min.append(float(traj.eval.lambda2.min()))
        mu = max(mu / 10.0, MU_MIN)
        if improvement <= 1e-12 * max(1.0, abs(traj.cost)):
            break
    return SolveResult(
        inputs=traj.inputs,
        cost_before=cost0,
        cost_after=traj.cost,
        iterations=it,
        accepted=accepted,
        improved=accepted > 0,
        fd_fallbacks=solver.fd_fallbacks,
        counter=counter,
        lambda_min=lam_min,
    )


def numerical_hessian_count(problem: PlanningProblem, base: NominalPlan, subset, counter: mt.EvalCounter,
                            step: float = 1e-4) -> np.ndarray:
    """Benchmark oracle: central-difference Hessian of the barrier over full belief vectors.

    Evaluates ``d2 J^c / db_V db_V`` at every timestep with the standard
    four-point stencil and returns the ``(T+1, d, d)`` Hessians; the evaluation
    count lands in ``counter`` under the tag ``"numerical_hessian"``.
    """
    p = problem
    subset = list(subset)
    n = p.state_dim
    nb = p.models[0].belief_dim
    d = len(subset) * nb
    idx = list(p.position_indices)
    T = p.horizon
    out = np.empty((T + 1, d, d))

    def vec_to(mm, cc, vec):
        mm, cc = mm.copy(), cc.copy()
        for r, i in enumerate(subset):
            b = Belief.from_vector(vec[r * nb:(r + 1) * nb], n)
            mm[i], cc[i] = b.mean, b.cov
        return mm, cc

    for t in range(T + 1):
        mm0, cc0 = base.means[:, t], base.covs[:, t]
        v0 = np.concatenate([Belief(mm0[i], cc0[i]).to_vector() for i in subset])
        pts, stencil = [], []
        pts.append(v0)
        for a in range(d):
            for b in range(a, d):
                if a == b:
                    for s in (1, -1):
                        v = v0.copy()
                        v[a] += s * step
                        pts.append(v)
                else:
                    for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                        v = v0.copy()
                        v[a] += sa * step
                        v[b] += sb * step
                        pts.append(v)
                stencil.append((a, b))
        pm, pc = zip(*(vec_to(mm0, cc0, v) for v in pts))
        pm, pc = np.stack(pm), np.stack(pc)
        ev = mt.evaluate_batch(pm[:, :, idx], pc[:, :, idx][:, :, :, idx], p.cfg, counter, "numerical_hessian")
        j = mt.connectivity_cost(ev.lambda2, p.cfg)
        f0 = j[0]
        pos = 1
        H = np.empty((d, d))
        for a, b in stencil:
            if a == b:
                H[a, a] = (j[pos] - 2 * f0 + j[pos + 1]) / step**2
                pos += 2
            else:
                H[a, b] = H[b, a] = (j[pos] - j[pos + 1] - j[pos + 2] + j[pos + 3]) / (4 * step**2)
                pos += 4
        out[t] = H
    return out
