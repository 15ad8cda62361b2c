"""Distributed ADMM consensus planner.

Each robot ``i`` keeps its own copy of the consensus inputs ``Ubar`` and of
its dual ``Y``.  An iteration runs in three phases:

1. parallel: every robot optimises the rows of a subset ``V`` (itself plus
   ``eta - 1`` others picked by a cyclic schedule) with the iLQG solver;
2. exchange: the optimised rows are broadcast (lossless, with a fixed
   simulated delay);
3. replicated: every robot averages the received rows, line-searches the
   consensus update so the induced plan stays above the connectivity floor,
   and updates its dual.

Phase 3 takes identical inputs on every robot, so it is computed once and
shared; ``verify_replication`` recomputes it per robot and checks equality.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metric as mt
from .errors import BarrierViolation, ConfigError, DomainError, InfeasibleMissionError, ProtocolError
from .ilqg import AugmentedCostTerms, NominalPlan, PlanningProblem, ilqg_solve, transformed_cost

log = logging.getLogger(__name__)

WORKERS_ENV = "CONNPLAN_WORKERS"


@dataclass(frozen=True)
class AdmmParams:
    rho: float = 1.0
    eta: int = 2
    gamma: float = 0.8
    ilqg_budget: int = 3
    max_iterations: int = 50
    stop: str = "converged"  # or "time"
    time_budget_s: float = 25.0
    comm_delay_s: float = 0.2
    clock: str = "wall"  # or "model": solve time = metric evaluations * model_eval_s
    model_eval_s: float = 2e-4
    rel_tol: float = 1e-4
    rel_window: int = 5
    residual_tol: float = 1e-3
    beta_floor: float = 1e-6
    workers: Optional[int] = None
    verify_replication: bool = False

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.eta < 1:
            raise ConfigError("eta must be >= 1")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.ilqg_budget < 0 or self.max_iterations < 0:
            raise ConfigError("iteration budgets must be non-negative")
        if self.stop not in ("converged", "time"):
            raise ConfigError(f"unknown stop mode {self.stop!r}")
        if self.clock not in ("wall", "model"):
            raise ConfigError(f"unknown clock {self.clock!r}")
        if self.time_budget_s <= 0 or self.comm_delay_s < 0:
            raise ConfigError("time budget must be positive and delay non-negative")


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def select_subset(i: int, k: int, n: int, eta: int) -> list:
    """Subset optimised by robot ``i`` (0-based) at iteration ``k`` (1-based).

    Robot ``i`` first, then ``eta - 1`` consecutive robots of the cyclic
    sequence ``i+1, ..., n-1, 0, ..., i-1`` starting at offset ``(k-1) mod (n-1)``.
    """
    if not 1 <= eta <= n:
        raise ConfigError(f"need 1 <= eta <= n (got eta={eta}, n={n})")
    if not 0 <= i < n or k < 1:
        raise DomainError(f"invalid robot {i} or iteration {k}")
    if eta == 1:
        return [i]
    others = [(i + 1 + j) % n for j in range(n - 1)]
    off = (k - 1) % (n - 1)
    return [i] + [others[(off + j) % (n - 1)] for j in range(eta - 1)]


@dataclass(frozen=True)
class ExchangeMessage:
    sender: int
    iteration: int
    subset: tuple
    rows: np.ndarray  # (|V|, T, m), ordered like ``subset``

    def __post_init__(self):
        if len(set(self.subset)) != len(self.subset) or self.sender not in self.subset:
            raise ProtocolError("subset indices must be distinct and include the sender")
        if len(self.rows) != len(self.subset):
            raise ProtocolError("one input row per subset index is required")


def admm_average(messages: Sequence[ExchangeMessage], n: int, eta: int) -> np.ndarray:
    """Average every robot's optimised row over the ``eta`` senders that optimised it.

    Messages are reduced in sender order so the result does not depend on
    arrival order.
    """
    msgs = sorted(messages, key=lambda m: m.sender)
    if not msgs:
        raise ProtocolError("no messages to average")
    total = np.zeros((n,) + msgs[0].rows.shape[1:])
    count = np.zeros(n, dtype=int)
    for msg in msgs:
        for r, j in enumerate(msg.subset):
            total[j] += msg.rows[r]
            count[j] += 1
    bad = np.nonzero(count != eta)[0]
    if bad.size:
        raise ProtocolError(f"robots {bad.tolist()} covered {count[bad].tolist()} times, expected {eta}")
    return total / eta


def consensus_line_search(prev: np.ndarray, target: np.ndarray, gamma: float,
                          feasible: Callable[[np.ndarray], bool], beta_floor: float = 1e-6):
    """Largest ``beta`` in ``1, gamma, gamma**2, ...`` whose step keeps the plan feasible.

    Returns ``(Ubar, beta)``; ``beta == 0`` means the previous consensus was kept.
    """
    if not 0 < gamma < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    step = target - prev
    if not np.any(step):
        return prev.copy(), 1.0
    beta = 1.0
    while beta >= beta_floor:
        cand = prev + beta * step
        if feasible(cand):
            return cand, beta
        beta *= gamma
    if not feasible(prev):
        raise InfeasibleMissionError("previous consensus is infeasible; invariant violated")
    return prev.copy(), 0.0


def dual_update(dual: np.ndarray, local: np.ndarray, consensus: np.ndarray, rho: float) -> np.ndarray:
    return dual + rho * (local - consensus)


@dataclass
class AdmmState:
    """Per-robot ADMM variables (robot ``i``'s view)."""

    robot_id: int
    iteration: int
    local_plan: np.ndarray
    consensus: np.ndarray
    dual: np.ndarray
    rho: float
    eta: int
    gamma: float

    @classmethod
    def initial(cls, i: int, inputs: np.ndarray, params: AdmmParams) -> "AdmmState":
        return cls(i, 1, inputs.copy(), inputs.copy(), np.zeros_like(inputs), params.rho, params.eta, params.gamma)


@dataclass
class IterationRecord:
    iteration: int
    transformed_cost: float
    best_cost: float
    beta: float
    residual: float
    min_lambda: float
    sim_time_s: float
    solve_time_s: float
    accepted_steps: int
    metric_evals: int


@dataclass
class PlanResult:
    plan: NominalPlan
    trace: list
    stop_reason: str
    counter: mt.EvalCounter
    states: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def _solve_task(args):
    problem, base, subset, aug, budget = args
    counter = mt.EvalCounter()
    t0 = time.perf_counter()
    res = ilqg_solve(problem, base, subset, aug, budget=budget, counter=counter)
    return res.inputs, res.accepted, counter.counts, time.perf_counter() - t0


def feasible_inputs(problem: PlanningProblem, inputs: np.ndarray, counter=None) -> bool:
    means, covs = problem.propagate(inputs)
    ev = problem.metric(means, covs, counter, "feasibility")
    return bool(np.all(ev.lambda2 > problem.cfg.epsilon))


def plan(problem: PlanningProblem, initial: NominalPlan, params: AdmmParams = AdmmParams(),
         counter: Optional[mt.EvalCounter] = None,
         on_iteration: Optional[Callable[[IterationRecord, NominalPlan], None]] = None) -> PlanResult:
    """Run consensus ADMM from ``initial`` until the stopping rule fires."""
    counter = counter if counter is not None else mt.EvalCounter()
    N = problem.n_robots
    if params.eta > N:
        raise ConfigError(f"eta={params.eta} exceeds the robot count {N}")
    if not feasible_inputs(problem, initial.inputs, counter):
        raise InfeasibleMissionError("initial guess violates the connectivity floor")
    states = [AdmmState.initial(i, initial.inputs, params) for i in range(N)]
    consensus = NominalPlan.from_inputs(problem, initial.inputs)
    cost = transformed_cost(problem, consensus, counter)
    best = cost
    lam = problem.metric(consensus.means, consensus.covs).lambda2
    trace = [IterationRecord(0, cost, best, 1.0, 0.0, float(lam.min()), 0.0, 0.0, 0, counter.total)]
    if on_iteration:
        on_iteration(trace[0], consensus)

    workers = params.workers if params.workers is not None else default_workers()
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    clock = 0.0
    longest = 0.0
    small_changes = 0
    stop_reason = "max_iterations"
    try:
        for k in range(1, params.max_iterations + 1):
            if params.stop == "time" and longest > 0 and clock + 1.5 * longest > params.time_budget_s:
                stop_reason = "time_budget"
                break
            iter_start = time.perf_counter()
            evals_before = counter.total
            subsets = [select_subset(i, k, N, params.eta) for i in range(N)]
            tasks = []
            for i, V in enumerate(subsets):
                aug = AugmentedCostTerms(states[i].dual[V], states[i].consensus[V], params.rho)
                tasks.append((problem, consensus, V, aug, params.ilqg_budget))
            results = list(pool.map(_solve_task, tasks)) if pool else [_solve_task(t) for t in tasks]

            messages = []
            accepted = 0
            solve_times = []
            for i, (rows, acc, counts, secs) in enumerate(results):
                messages.append(ExchangeMessage(i, k, tuple(subsets[i]), rows))
                accepted += acc
                for tag, c in sorted(counts.items()):
                    counter.add(c, tag)
                solve_times.append(sum(counts.values()) * params.model_eval_s if params.clock == "model" else secs)

            upd_start = time.perf_counter()
            evals_upd = counter.total
            new_consensus, beta, new_duals, local_plans = _replicated_update(
                problem, states, messages, params, counter)
            if params.verify_replication:
                for i in range(N):
                    other, b2, _, _ = _replicated_update(problem, states, messages, params, None)
                    if b2 != beta or not np.array_equal(other, new_consensus):
                        raise ProtocolError(f"robot {i} computed a different consensus update")
            if params.clock == "model":
                upd_time = (counter.total - evals_upd) * params.model_eval_s
            else:
                upd_time = time.perf_counter() - upd_start
            duration = max(solve_times) + upd_time + params.comm_delay_s
            if params.stop == "time" and clock + duration > params.time_budget_s:
                # this iteration would finish past the deadline: discard it
                stop_reason = "time_budget"
                break
            clock += duration
            longest = max(longest, duration)

            residual = max(float(np.max(np.abs(lp - new_consensus), initial=0.0)) for lp in local_plans)
            for i in range(N):
                st = states[i]
                st.local_plan = local_plans[i]
                st.consensus = new_consensus.copy()
                st.dual = new_duals[i]
                st.iteration = k + 1
            consensus = NominalPlan.from_inputs(problem, new_consensus)
            ev = problem.metric(consensus.means, consensus.covs)
            if not np.all(ev.lambda2 > problem.cfg.epsilon):
                raise InfeasibleMissionError(f"consensus left the feasible region at iteration {k}")
            prev_cost = cost
            cost = transformed_cost(problem, consensus, counter)
            best = min(best, cost)
            rec = IterationRecord(k, cost, best, beta, residual, float(ev.lambda2.min()), clock,
                                  time.perf_counter() - iter_start, accepted, counter.total - evals_before)
            trace.append(rec)
            log.info("admm k=%d cost=%.6g beta=%.3g residual=%.3g min_lambda=%.4f", k, cost, beta, residual,
                     rec.min_lambda)
            if on_iteration:
                on_iteration(rec, consensus)
            rel = abs(cost - prev_cost) / max(1.0, abs(prev_cost))
            small_changes = small_changes + 1 if rel < params.rel_tol else 0
            if params.stop == "converged" and small_changes >= params.rel_window and residual < params.residual_tol:
                stop_reason = "converged"
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return PlanResult(consensus, trace, stop_reason, counter, states)


def _replicated_update(problem, states, messages, params: AdmmParams, counter):
    """Averaging, consensus line search and dual updates for every robot."""
    N = problem.n_robots
    avg = admm_average(messages, N, params.eta)
    prev = states[0].consensus

    def feasible(u):
        try:
            return feasible_inputs(problem, u, counter)
        except BarrierViolation:
            return False

    new_consensus, beta = consensus_line_search(prev, problem.clamp(avg), params.gamma, feasible, params.beta_floor)
    local_plans, duals = [], []
    for msg in messages:
        i = msg.sender
        # rows outside the subset follow the new consensus and leave the dual unchanged
        local = new_consensus.copy()
        local[list(msg.subset)] = msg.rows
        local_plans.append(local)
        duals.append(dual_update(states[i].dual, local, new_consensus, params.rho))
    return new_consensus, beta, duals, local_plans
