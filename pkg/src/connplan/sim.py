"""Mission layer: double-integrator UAVs, LQR guesses and tracking, rollouts, validation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import metric as mt
from . import spectral
from .admm import AdmmParams, PlanResult, default_workers, feasible_inputs, plan as admm_plan
from .belief import Belief, SystemModels, kalman_gain
from .errors import ConfigError, DomainError, InfeasibleMissionError, NumericalError
from .ilqg import NominalPlan, PlanningProblem

log = logging.getLogger(__name__)

ROLLOUT_CHUNK = 50
COMPARE_TOL = 1e-9
MAX_HALVINGS = 20


def double_integrator_models(dt: float = 0.2, process_intensity: float = 0.1, meas_var: float = 1.0,
                             dim: int = 2) -> SystemModels:
    """Constant-acceleration model with position measurements."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    I, Z = np.eye(dim), np.zeros((dim, dim))
    A = np.block([[I, dt * I], [Z, I]])
    B = np.vstack([0.5 * dt**2 * I, dt * I])
    Q = process_intensity * np.block([[dt**3 / 3 * I, dt**2 / 2 * I], [dt**2 / 2 * I, dt * I]])
    C = np.hstack([I, Z])
    return SystemModels.linear(A, B, C, Q, meas_var * np.eye(dim), tuple(range(dim)))


# --------------------------------------------------------------------- LQR
def finite_horizon_lqr(A, B, Wx_terminal, Wu, horizon: int) -> np.ndarray:
    """Time-varying gains ``K_t`` for terminal cost ``x'Wx x`` plus ``sum u'Wu u``."""
    P = np.asarray(Wx_terminal, dtype=float)
    K = np.empty((horizon, B.shape[1], A.shape[0]))
    for t in range(horizon - 1, -1, -1):
        S = Wu + B.T @ P @ B
        K[t] = np.linalg.solve(S, B.T @ P @ A)
        P = A.T @ P @ (A - B @ K[t])
        P = 0.5 * (P + P.T)
    return K


@dataclass(frozen=True)
class LqrTracker:
    gain: np.ndarray  # u = u_nom - K (xhat - x_nom)
    riccati: np.ndarray
    spectral_radius: float
    iterations: int

    def __call__(self, deviation):
        return -deviation @ self.gain.T


def lqr_tracker(A, B, Q, R, tol: float = 1e-12, max_iter: int = 10000) -> LqrTracker:
    """Infinite-horizon discrete LQR gain by Riccati fixed-point iteration."""
    A, B, Q, R = (np.asarray(m, dtype=float) for m in (A, B, Q, R))
    P = Q.copy()
    for it in range(1, max_iter + 1):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P_new = Q + A.T @ P @ (A - B @ K)
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            break
        P = P_new
    else:
        raise NumericalError(f"Riccati iteration did not converge in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))
    if rho >= 1.0:
        raise NumericalError(f"closed loop is not stable (spectral radius {rho:.6f})")
    return LqrTracker(K, P, rho, it)


def dare_residual(A, B, Q, R, P) -> float:
    S = R + B.T @ P @ B
    res = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) + Q
    return float(np.max(np.abs(res)))


# ----------------------------------------------------------------- missions
@dataclass(frozen=True)
class RobotSpec:
    id: str
    role: str  # "primary" or "bridge"
    init: tuple
    desired: tuple = ()  # one position per segment, primaries only

    def __post_init__(self):
        if self.role not in ("primary", "bridge"):
            raise ConfigError(f"robot {self.id}: role must be primary or bridge, got {self.role!r}")
        if self.role == "primary" and not self.desired:
            raise ConfigError(f"primary robot {self.id} needs desired positions")
        if self.role == "bridge" and self.desired:
            raise ConfigError(f"bridge robot {self.id} cannot have desired positions")


@dataclass(frozen=True)
class MissionSpec:
    robots: tuple
    name: str = "mission"
    mode: str = "offline"  # or "online"
    dt: float = 0.2
    horizon: int = 250
    process_intensity: float = 0.1
    meas_var: float = 1.0
    u_max: float = 5.0
    sigma_init: tuple = (0.1, 0.1, 0.001, 0.001)
    wx_primary: tuple = (1.0, 1.0, 100.0, 100.0)
    wx_bridge: tuple = (0.0, 0.0, 100.0, 100.0)
    wu: float = 0.01
    tracking_wx: Optional[tuple] = None  # defaults to wx_primary
    tracking_wu: Optional[float] = None  # defaults to wu
    delta: float = 40.0
    delta0: float = 35.0
    epsilon: float = 0.1
    delta_conf: float = 0.997
    k_c: float = 0.001
    admm: AdmmParams = field(default_factory=AdmmParams)
    rollouts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.robots) < 2:
            raise ConfigError("a mission needs at least two robots")
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        if self.horizon < 1 or self.dt <= 0:
            raise ConfigError("need horizon >= 1 and dt > 0")
        if self.rollouts < 0:
            raise ConfigError("rollout count must be non-negative")
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigError("robot ids must be unique")
        segs = {len(r.desired) for r in self.robots if r.role == "primary"}
        if len(segs) > 1:
            raise ConfigError("every primary robot needs one desired position per segment")
        if not segs:
            raise ConfigError("a mission needs at least one primary robot")
        if self.mode == "offline" and segs != {1}:
            raise ConfigError("an offline mission has exactly one segment")
        self.connectivity()  # validates the connectivity parameters

    @property
    def n_robots(self) -> int:
        return len(self.robots)

    @property
    def n_segments(self) -> int:
        return max(len(r.desired) for r in self.robots)

    def connectivity(self) -> mt.ConnectivityConfig:
        return mt.ConnectivityConfig(self.delta, self.delta0, self.epsilon, self.delta_conf, self.k_c,
                                     self.n_robots, 2)

    def models(self) -> SystemModels:
        return double_integrator_models(self.dt, self.process_intensity, self.meas_var)

    def initial_beliefs(self) -> list:
        cov = np.diag(self.sigma_init)
        return [Belief(np.array([*r.init, 0.0, 0.0]), cov) for r in self.robots]

    def desired_states(self, segment: int, beliefs: Sequence[Belief]) -> np.ndarray:
        out = []
        for r, b in zip(self.robots, beliefs):
            pos = r.desired[segment] if r.role == "primary" else b.mean[:2]
            out.append([*pos, 0.0, 0.0])
        return np.array(out, dtype=float)

    def problem(self, segment: int = 0, init_beliefs: Optional[Sequence[Belief]] = None,
                horizon: Optional[int] = None) -> PlanningProblem:
        beliefs = self.initial_beliefs() if init_beliefs is None else list(init_beliefs)
        m = self.models()
        Wx = np.stack([np.diag(self.wx_primary if r.role == "primary" else self.wx_bridge) for r in self.robots])
        Wu = np.stack([self.wu * np.eye(2)] * self.n_robots)
        return PlanningProblem([m] * self.n_robots, beliefs, self.desired_states(segment, beliefs), Wx, Wu,
                               self.connectivity(), horizon or self.horizon, self.u_max)


def lqr_initial_guess(problem: PlanningProblem, roles: Sequence[str], max_halvings: int = MAX_HALVINGS):
    """LQR steering guess for primaries, hovering bridges, bisected toward the start if infeasible.

    Returns ``(NominalPlan, halvings)``.
    """
    N, T = problem.n_robots, problem.horizon
    targets = problem.x_des.copy()
    starts = np.stack([b.mean for b in problem.init_beliefs])
    for halving in range(max_halvings + 1):
        inputs = np.zeros((N, T, problem.input_dim))
        for i, role in enumerate(roles):
            if role != "primary":
                continue
            m = problem.models[i]
            K = finite_horizon_lqr(m.A, m.B, problem.Wx[i], problem.Wu[i], T)
            x = starts[i].copy()
            for t in range(T):
                u = problem.clamp(-K[t] @ (x - targets[i]))
                inputs[i, t] = u
                x = m.A @ x + m.B @ u
        if feasible_inputs(problem, inputs):
            return NominalPlan.from_inputs(problem, inputs), halving
        if halving < max_halvings:
            log.info("initial guess infeasible; moving desired states halfway toward the start")
            for i, role in enumerate(roles):
                if role == "primary":
                    targets[i] = 0.5 * (starts[i] + targets[i])
    raise InfeasibleMissionError(f"initial guess still infeasible after {max_halvings} halvings")


# ----------------------------------------------------------------- rollouts
@dataclass
class RolloutResult:
    """One closed-loop run.  Arrays are indexed ``[robot, t]`` / ``[t]``."""

    true_states: np.ndarray  # (N, T+1, n)
    belief_means: np.ndarray  # (N, T+1, n)
    lambda2: np.ndarray  # (T+1,) binary-graph connectivity of the true positions
    below_epsilon: np.ndarray  # (T+1,) bool
    below_metric: np.ndarray  # (T+1,) bool
    max_input: float

    @property
    def min_lambda2(self) -> float:
        return float(self.lambda2.min())


@dataclass
class RolloutBatch:
    seeds: list
    true_states: np.ndarray  # (S, N, T+1, n)
    belief_means: np.ndarray  # (S, N, T+1, n)
    lambda2: np.ndarray  # (S, T+1)
    nominal_metric: np.ndarray  # (T+1,)
    epsilon: float
    max_input: np.ndarray  # (S,)

    def __len__(self):
        return len(self.seeds)

    @property
    def below_epsilon(self) -> np.ndarray:
        return self.lambda2 < self.epsilon

    @property
    def below_metric(self) -> np.ndarray:
        # equal spectra computed from different weight matrices may differ in the last bits
        return self.lambda2 < self.nominal_metric[None, :] - COMPARE_TOL

    def result(self, k: int) -> RolloutResult:
        return RolloutResult(self.true_states[k], self.belief_means[k], self.lambda2[k], self.below_epsilon[k],
                             self.below_metric[k], float(self.max_input[k]))


def rollout_seed(root: int, index: int) -> np.random.SeedSequence:
    """Sub-seed of rollout ``index``: the pair ``(root, index)`` fed to a SeedSequence."""
    return np.random.SeedSequence([int(root), int(index)])


@dataclass(frozen=True)
class _RolloutContext:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    gains: np.ndarray  # (T, n, p) Kalman gains
    K: np.ndarray  # (m, n) tracking gain
    nominal_inputs: np.ndarray  # (N, T, m)
    nominal_means: np.ndarray  # (N, T+1, n)
    init_means: np.ndarray  # (N, n)
    init_cov: np.ndarray  # (N, n, n)
    u_max: Optional[float]
    delta: float
    position_indices: tuple


def _context(plan: NominalPlan, problem: PlanningProblem, tracker: LqrTracker) -> _RolloutContext:
    m = problem.models[0]
    if not problem.linear or any(mm is not m and not _same_model(mm, m) for mm in problem.models):
        raise DomainError("vectorised rollouts need identical linear models")
    if plan.inputs.shape != (problem.n_robots, problem.horizon, problem.input_dim):
        raise DomainError("plan does not match the problem")
    covs = problem.covariances()[0]
    gains = np.empty((problem.horizon, m.state_dim, m.meas_dim))
    for t in range(problem.horizon):
        pred = m.A @ covs[t] @ m.A.T + m.process_cov
        gains[t] = kalman_gain(0.5 * (pred + pred.T), m.C, m.meas_cov)
    if any(not np.array_equal(b.cov, problem.init_beliefs[0].cov) for b in problem.init_beliefs):
        raise DomainError("vectorised rollouts need a common initial covariance")
    return _RolloutContext(m.A, m.B, m.C, m.process_cov, m.meas_cov, gains, tracker.gain, plan.inputs,
                           plan.means, np.stack([b.mean for b in problem.init_beliefs]),
                           np.stack([b.cov for b in problem.init_beliefs]), problem.u_max, problem.cfg.delta,
                           problem.position_indices)


def _same_model(a: SystemModels, b: SystemModels) -> bool:
    return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("A", "B", "C", "process_cov", "meas_cov"))


def _factor(m):
    w, v = np.linalg.eigh(m)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _simulate_chunk(ctx: _RolloutContext, seeds: Sequence[np.random.SeedSequence]):
    N, T, mdim = ctx.nominal_inputs.shape
    n = ctx.A.shape[0]
    p = ctx.C.shape[0]
    S = len(seeds)
    x0n = np.empty((S, N, n))
    wn = np.empty((S, T, N, n))
    vn = np.empty((S, T, N, p))
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        x0n[k] = rng.standard_normal((N, n))
        wn[k] = rng.standard_normal((T, N, n))
        vn[k] = rng.standard_normal((T, N, p))
    L0 = np.stack([_factor(c) for c in ctx.init_cov])  # (N, n, n)
    LQ, LR = _factor(ctx.Q), _factor(ctx.R)
    x = ctx.init_means[None] + np.einsum("rij,srj->sri", L0, x0n)
    xhat = np.broadcast_to(ctx.init_means, (S, N, n)).copy()
    xs = np.empty((S, N, T + 1, n))
    xh = np.empty((S, N, T + 1, n))
    xs[:, :, 0], xh[:, :, 0] = x, xhat
    umax = np.zeros(S)
    for t in range(T):
        u = ctx.nominal_inputs[None, :, t] - (xhat - ctx.nominal_means[None, :, t]) @ ctx.K.T
        if ctx.u_max is not None:
            norm = np.linalg.norm(u, axis=-1, keepdims=True)
            u = u * np.where(norm > ctx.u_max, ctx.u_max / np.where(norm > 0, norm, 1.0), 1.0)
        umax = np.maximum(umax, np.linalg.norm(u, axis=-1).max(axis=-1))
        x = x @ ctx.A.T + u @ ctx.B.T + wn[:, t] @ LQ.T
        pred = xhat @ ctx.A.T + u @ ctx.B.T
        z = x @ ctx.C.T + vn[:, t] @ LR.T
        xhat = pred + (z - pred @ ctx.C.T) @ ctx.gains[t].T
        xs[:, :, t + 1], xh[:, :, t + 1] = x, xhat
    idx = list(ctx.position_indices)
    pos = xs[..., idx]  # (S, N, T+1, p)
    diff = pos[:, :, None] - pos[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))  # (S, N, N, T+1)
    w = (dist <= ctx.delta).astype(float)
    w[:, np.arange(N), np.arange(N)] = 0.0
    w = np.moveaxis(w, -1, 1)  # (S, T+1, N, N)
    lam = spectral.lambda2_from_weights(w)
    return xs, xh, lam, umax


def rollout_batch(plan: NominalPlan, problem: PlanningProblem, count: int, root_seed: int = 0,
                  tracker: Optional[LqrTracker] = None, workers: Optional[int] = None,
                  first_index: int = 0) -> RolloutBatch:
    """``count`` closed-loop runs with per-rollout sub-seeds ``(root_seed, index)``.

    Rollouts are simulated in fixed-size chunks, so results do not depend on
    the number of workers.
    """
    if count < 0:
        raise DomainError("rollout count must be non-negative")
    if tracker is None:
        raise DomainError("a tracking controller is required")
    ctx = _context(plan, problem, tracker)
    nominal = problem.metric(plan.means, plan.covs).lambda2
    N, T, n = problem.n_robots, problem.horizon, problem.state_dim
    seeds = [rollout_seed(root_seed, first_index + k) for k in range(count)]
    if count == 0:
        return RolloutBatch([], np.empty((0, N, T + 1, n)), np.empty((0, N, T + 1, n)), np.empty((0, T + 1)),
                            nominal, problem.cfg.epsilon, np.empty(0))
    chunks = [seeds[k:k + ROLLOUT_CHUNK] for k in range(0, count, ROLLOUT_CHUNK)]
    workers = workers if workers is not None else default_workers()
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, [ctx] * len(chunks), chunks))
    else:
        parts = [_simulate_chunk(ctx, c) for c in chunks]
    xs, xh, lam, umax = (np.concatenate(a) for a in zip(*parts))
    return RolloutBatch([(root_seed, first_index + k) for k in range(count)], xs, xh, lam,
                        nominal, problem.cfg.epsilon, umax)


def rollout(plan: NominalPlan, problem: PlanningProblem, seed: int, tracker: LqrTracker,
            index: int = 0) -> RolloutResult:
    """A single closed-loop run (rollout ``index`` of root ``seed``)."""
    return rollout_batch(plan, problem, 1, seed, tracker, workers=1, first_index=index).result(0)


# --------------------------------------------------------------- validation
def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n > 0 else math.inf


def wilson_interval(successes: int, n: int, z: float = 3.0):
    if n == 0:
        return (0.0, 1.0)
    ph = successes / n
    den = 1 + z * z / n
    centre = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class ValidationSummary:
    n_rollouts: int
    delta: float
    per_step_below_epsilon: np.ndarray  # (T+1,) counts
    per_step_below_metric: np.ndarray  # (T+1,) counts
    rollouts_below_epsilon: int
    rollouts_below_metric: int
    min_success_rate: float  # min over t of empirical Pr[lambda2 > epsilon]
    success_interval: tuple  # 3-sigma Wilson interval at the worst timestep
    margin: float  # 3 binomial sigmas at delta
    passed_epsilon: bool
    passed_metric: bool

    @property
    def fraction_below_epsilon(self) -> float:
        return self.rollouts_below_epsilon / self.n_rollouts

    @property
    def fraction_below_metric(self) -> float:
        return self.rollouts_below_metric / self.n_rollouts

    @property
    def passed(self) -> bool:
        return self.passed_epsilon and self.passed_metric


def validate_connectivity(batch: RolloutBatch, delta_conf: float) -> ValidationSummary:
    """Per-timestep chance-constraint check against ``delta_conf`` with a 3-sigma binomial margin."""
    M = len(batch)
    if M == 0:
        raise DomainError("validation needs at least one rollout")
    be = batch.below_epsilon
    bm = batch.below_metric
    per_eps = be.sum(axis=0)
    per_met = bm.sum(axis=0)
    success = 1.0 - per_eps / M
    worst = int(np.argmin(success))
    margin = 3.0 * binomial_sigma(delta_conf, M)
    metric_rate = 1.0 - per_met / M
    return ValidationSummary(
        n_rollouts=M,
        delta=delta_conf,
        per_step_below_epsilon=per_eps,
        per_step_below_metric=per_met,
        rollouts_below_epsilon=int(np.any(be, axis=1).sum()),
        rollouts_below_metric=int(np.any(bm, axis=1).sum()),
        min_success_rate=float(success[worst]),
        success_interval=wilson_interval(int(M - per_eps[worst]), M),
        margin=margin,
        passed_epsilon=bool(np.all(success >= delta_conf - margin)),
        passed_metric=bool(np.all(metric_rate >= delta_conf - margin)),
    )


# ------------------------------------------------------------ mission runs
@dataclass
class SegmentResult:
    segment: int
    problem: PlanningProblem
    guess: NominalPlan
    halvings: int
    result: PlanResult


def plan_segment(mission: MissionSpec, segment: int = 0, init_beliefs=None, params: Optional[AdmmParams] = None,
                 counter=None, on_iteration=None) -> SegmentResult:
    problem = mission.problem(segment, init_beliefs)
    roles = [r.role for r in mission.robots]
    guess, halvings = lqr_initial_guess(problem, roles)
    res = admm_plan(problem, guess, params or mission.admm, counter, on_iteration)
    return SegmentResult(segment, problem, guess, halvings, res)


def run_offline_mission(mission: MissionSpec, params: Optional[AdmmParams] = None, counter=None,
                        on_iteration=None) -> SegmentResult:
    return plan_segment(mission, 0, None, params, counter, on_iteration)


@dataclass
class OnlineResult:
    segments: list
    problem: PlanningProblem  # whole mission, horizon = segments * T
    plan: NominalPlan  # stitched


def run_online_mission(mission: MissionSpec, params: Optional[AdmmParams] = None, counter=None,
                       on_iteration=None) -> OnlineResult:
    """Plan each segment under the time budget, starting from the previous segment's terminal beliefs."""
    params = params or replace(mission.admm, stop="time")
    segs = []
    beliefs = None
    for s in range(mission.n_segments):
        cb = None if on_iteration is None else (lambda rec, pl, s=s: on_iteration(s, rec, pl))
        seg = plan_segment(mission, s, beliefs, params, counter, cb)
        segs.append(seg)
        final = seg.result.plan
        beliefs = [Belief(final.means[i, -1], final.covs[i, -1]) for i in range(mission.n_robots)]
    whole = mission.problem(0, None, horizon=mission.horizon * len(segs))
    inputs = np.concatenate([sg.result.plan.inputs for sg in segs], axis=1)
    stitched = NominalPlan.from_inputs(whole, inputs)
    return OnlineResult(segs, whole, stitched)


def mission_tracker(mission: MissionSpec) -> LqrTracker:
    """Tracking controller, by default from the primary planning weights.

    Bridge weights carry no position term, so they cannot stabilise position
    tracking; every robot therefore uses the primary weights.
    """
    m = mission.models()
    wx = mission.wx_primary if mission.tracking_wx is None else mission.tracking_wx
    wu = mission.wu if mission.tracking_wu is None else mission.tracking_wu
    return lqr_tracker(m.A, m.B, np.diag(wx), wu * np.eye(2))
