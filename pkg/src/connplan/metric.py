"""Uncertainty-aware connectivity metric, its barrier cost and derivatives.

Each robot's position estimate is inflated to a disc whose radius is the
confidence scale ``s`` times the square root of the largest position-covariance
eigenvalue.  Pairwise distance measures between disc boundaries feed a
cosine-windowed edge weight; the algebraic connectivity of that graph lower
bounds the true (disk-model) algebraic connectivity with probability at least
``delta_conf``.

The batched entry points (:func:`evaluate_batch`, :func:`gradient_batch`)
operate on arrays with a leading batch axis so a whole trajectory is handled
in one eigensolver call.  :func:`connectivity_metric` and
:func:`metric_gradient` are the single-configuration wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from . import spectral
from .belief import Belief
from .errors import BarrierViolation, DomainError, GradientUndefinedError, NumericalError

COINCIDENT_TOL = 1e-9


@dataclass(frozen=True)
class ConnectivityConfig:
    delta: float = 40.0
    delta0: float = 35.0
    epsilon: float = 0.1
    delta_conf: float = 0.997
    k_c: float = 0.001
    n_robots: int = 2
    position_dim: int = 2

    def __post_init__(self):
        if not 0 < self.delta0 < self.delta:
            raise DomainError(f"need 0 < delta0 < delta (got delta0={self.delta0}, delta={self.delta})")
        if self.n_robots < 1:
            raise DomainError("n_robots must be >= 1")
        if not 0 < self.epsilon < self.n_robots:
            raise DomainError(f"need 0 < epsilon < n_robots (got epsilon={self.epsilon})")
        if not 0 < self.delta_conf < 1:
            raise DomainError(f"need 0 < delta_conf < 1 (got {self.delta_conf})")
        if self.k_c <= 0:
            raise DomainError("k_c must be positive")
        if self.position_dim < 1:
            raise DomainError("position_dim must be >= 1")

    @property
    def delta_ellipse(self) -> float:
        return delta_ellipse(self.delta_conf, self.n_robots)

    @property
    def scale(self) -> float:
        return confidence_scale(self.delta_ellipse, self.position_dim)


class EvalCounter:
    """Tally of metric evaluations (one per configuration evaluated), by tag."""

    def __init__(self):
        self.counts: dict = {}

    def add(self, n: int, tag: str = "default"):
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, tag):
        return self.counts.get(tag, 0)

    def reset(self):
        self.counts.clear()

    def merge(self, other: "EvalCounter"):
        for k, v in other.counts.items():
            self.add(v, k)


def delta_ellipse(delta_conf: float, n_robots: int) -> float:
    """Per-robot miss probability so that ``(1 - d)**N == delta_conf``."""
    if not 0 < delta_conf < 1:
        raise DomainError(f"delta_conf must lie in (0, 1), got {delta_conf}")
    if n_robots < 1:
        raise DomainError("n_robots must be >= 1")
    # 1 - x**(1/N) without cancellation for x close to 1
    return -math.expm1(math.log(delta_conf) / n_robots)


def confidence_scale(delta_e: float, position_dim: int) -> float:
    """Radius multiplier ``s``: sqrt of the (1 - delta_e) chi-square quantile."""
    if not 0 < delta_e < 1:
        raise DomainError(f"delta_e must lie in (0, 1), got {delta_e}")
    if position_dim == 2:
        return math.sqrt(-2.0 * math.log(delta_e))
    return math.sqrt(chi2.isf(delta_e, position_dim))


def _largest_eig(pos_covs: np.ndarray):
    """Largest eigenvalue, its eigenvector and a repeated-eigenvalue flag."""
    w, v = spectral.jacobi_eigh(pos_covs)
    if np.any(w[..., 0] < -1e-9 * np.maximum(1.0, np.abs(w[..., -1]))):
        raise NumericalError("position covariance is not positive semidefinite")
    top = np.clip(w[..., -1], 0.0, None)
    vec = v[..., :, -1]
    if w.shape[-1] > 1:
        repeated = np.abs(w[..., -1] - w[..., -2]) < spectral.DEGENERACY_TOL * np.maximum(1.0, top)
    else:
        repeated = np.zeros(top.shape, dtype=bool)
    return top, vec, repeated


@dataclass(frozen=True)
class BatchEvaluation:
    """Metric evaluated on a batch of configurations (leading axis ``B``)."""

    lambda2: np.ndarray  # (B,)
    fiedler: np.ndarray  # (B, N)
    degenerate: np.ndarray  # (B,)
    weights: np.ndarray  # (B, N, N)
    lbar: np.ndarray  # (B, N, N)
    dist: np.ndarray  # (B, N, N) mean-to-mean distances
    diff: np.ndarray  # (B, N, N, p) p_i - p_j
    cov_top: np.ndarray  # (B, N)
    cov_vec: np.ndarray  # (B, N, p)
    cov_repeated: np.ndarray  # (B, N)
    scale: float


def evaluate_batch(positions, pos_covs, cfg: ConnectivityConfig, counter: Optional[EvalCounter] = None,
                   tag: str = "default") -> BatchEvaluation:
    """Evaluate the metric for ``positions (B, N, p)`` and ``pos_covs (B, N, p, p)``."""
    positions = np.asarray(positions, dtype=float)
    pos_covs = np.asarray(pos_covs, dtype=float)
    if positions.ndim != 3:
        raise DomainError("positions must have shape (B, N, p)")
    B, N, _ = positions.shape
    if N < 2:
        raise DomainError("the metric needs at least two robots")
    s = cfg.scale
    top, vec, repeated = _largest_eig(pos_covs)
    radius = s * np.sqrt(top)
    diff = positions[:, :, None, :] - positions[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    lbar = dist + radius[:, :, None] + radius[:, None, :]
    idx = np.arange(N)
    lbar[:, idx, idx] = 0.0
    w = spectral.smooth_edge_weight(lbar, cfg.delta0, cfg.delta)
    w[:, idx, idx] = 0.0
    ev, evec = spectral.jacobi_eigh(spectral.laplacian_from_weights(w))
    if counter is not None:
        counter.add(B, tag)
    return BatchEvaluation(
        lambda2=np.clip(ev[:, 1], 0.0, None),
        fiedler=evec[:, :, 1],
        degenerate=spectral.is_degenerate(ev),
        weights=w,
        lbar=lbar,
        dist=dist,
        diff=diff,
        cov_top=top,
        cov_vec=vec,
        cov_repeated=repeated,
        scale=s,
    )


def gradient_batch(ev: BatchEvaluation, cfg: ConnectivityConfig, check: bool = True):
    """Gradients of lambda2 w.r.t. position means and position-covariance entries.

    Returns ``(d_pos (B, N, p), d_cov (B, N, p, p))``; ``d_cov`` is the
    derivative with respect to each entry of the full symmetric matrix.
    """
    slope = spectral.smooth_edge_weight_slope(ev.lbar, cfg.delta0, cfg.delta)
    N = slope.shape[1]
    slope[:, np.arange(N), np.arange(N)] = 0.0
    active = slope != 0.0
    if check:
        if np.any(ev.degenerate):
            raise GradientUndefinedError("lambda2 has multiplicity > 1; gradient undefined")
        if np.any(active & (ev.dist < COINCIDENT_TOL)):
            raise GradientUndefinedError("coincident means on an edge in the transition band")
    e = ev.fiedler
    coef = slope * (e[:, :, None] - e[:, None, :]) ** 2  # dlambda/dlbar_ij per edge
    safe = np.where(ev.dist < COINCIDENT_TOL, 1.0, ev.dist)
    unit = np.where(active[..., None], ev.diff / safe[..., None], 0.0)
    d_pos = np.sum(coef[..., None] * unit, axis=2)
    # every edge touching robot i moves with its covariance radius
    d_radius = np.sum(coef, axis=2)
    sqrt_top = np.sqrt(ev.cov_top)
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(sqrt_top > 0.0, ev.scale / (2.0 * sqrt_top), 0.0)
    outer = ev.cov_vec[..., :, None] * ev.cov_vec[..., None, :]
    d_cov = (d_radius * fac)[..., None, None] * outer
    return d_pos, d_cov


def to_belief_gradient(d_pos: np.ndarray, d_cov: np.ndarray, state_dim: int, position_indices) -> np.ndarray:
    """Map position/covariance derivatives onto belief-vector coordinates.

    Off-diagonal lower-triangle coordinates collect both symmetric entries.
    Works on arrays with arbitrary leading axes; the result has trailing
    dimension ``state_dim + state_dim*(state_dim+1)/2``.
    """
    pos = list(position_indices)
    lead = d_pos.shape[:-1]
    n = state_dim
    out = np.zeros(lead + (n + n * (n + 1) // 2,))
    out[..., pos] = d_pos
    rows, cols = np.tril_indices(n)
    where = {p: k for k, p in enumerate(pos)}
    for c, (r, q) in enumerate(zip(rows, cols)):
        if r in where and q in where:
            a, b = where[r], where[q]
            g = d_cov[..., a, b] if r == q else d_cov[..., a, b] + d_cov[..., b, a]
            out[..., n + c] = g
    return out


@dataclass(frozen=True)
class MetricEvaluation:
    lambda2_lb: float
    fiedler: np.ndarray
    edge_weights: spectral.WeightedGraph
    distance_measures: np.ndarray
    per_robot_largest_cov_eig: tuple
    degenerate_flag: bool
    cov_repeated: tuple
    scale: float
    _batch: BatchEvaluation = field(repr=False, compare=False, default=None)


def _stack(beliefs: Sequence[Belief], position_indices):
    idx = list(position_indices)
    pos = np.stack([b.mean[idx] for b in beliefs])
    cov = np.stack([b.cov[np.ix_(idx, idx)] for b in beliefs])
    return pos, cov


def connectivity_metric(beliefs: Sequence[Belief], cfg: ConnectivityConfig, position_indices=(0, 1),
                        counter: Optional[EvalCounter] = None) -> MetricEvaluation:
    if len(beliefs) < 2:
        raise DomainError("the metric needs at least two robots")
    pos, cov = _stack(beliefs, position_indices)
    ev = evaluate_batch(pos[None], cov[None], cfg, counter)
    return MetricEvaluation(
        lambda2_lb=float(ev.lambda2[0]),
        fiedler=ev.fiedler[0],
        edge_weights=spectral.WeightedGraph(ev.weights[0]),
        distance_measures=ev.lbar[0],
        per_robot_largest_cov_eig=tuple((float(ev.cov_top[0, i]), ev.cov_vec[0, i]) for i in range(len(beliefs))),
        degenerate_flag=bool(ev.degenerate[0]),
        cov_repeated=tuple(bool(x) for x in ev.cov_repeated[0]),
        scale=ev.scale,
        _batch=ev,
    )


def distance_measure(b_i: Belief, b_j: Belief, s: float, position_indices=(0, 1)) -> float:
    if s < 0:
        raise DomainError("confidence scale must be non-negative")
    pos, cov = _stack([b_i, b_j], position_indices)
    top, _, _ = _largest_eig(cov)
    return float(np.linalg.norm(pos[0] - pos[1]) + s * np.sqrt(top[0]) + s * np.sqrt(top[1]))


def metric_gradient(ev: MetricEvaluation, beliefs: Sequence[Belief], cfg: ConnectivityConfig,
                    position_indices=(0, 1)) -> list:
    """Per-robot gradient of the metric over belief-vector coordinates."""
    d_pos, d_cov = gradient_batch(ev._batch, cfg)
    n = beliefs[0].dim
    g = to_belief_gradient(d_pos[0], d_cov[0], n, position_indices)
    return [g[i] for i in range(len(beliefs))]


def connectivity_cost(lambda2_lb, cfg: ConnectivityConfig):
    """Barrier ``k_c / (lambda - epsilon)``; raises :class:`BarrierViolation` at or below epsilon."""
    lam = np.asarray(lambda2_lb, dtype=float)
    if np.any(lam <= cfg.epsilon):
        raise BarrierViolation(float(np.min(lam)), cfg.epsilon)
    cost = cfg.k_c / (lam - cfg.epsilon)
    return float(cost) if cost.ndim == 0 else cost


@dataclass(frozen=True)
class Rank1Hessian:
    """``J ~ 0.5 * curvature * (a.db)**2 + (slope * a).db + constant``."""

    curvature: float
    a: np.ndarray
    linear: np.ndarray
    constant: float

    def matrix(self) -> np.ndarray:
        return self.curvature * np.outer(self.a, self.a)


def barrier_derivatives(lambda2_lb, cfg: ConnectivityConfig):
    """``(J, dJ/dlambda, d2J/dlambda2)`` of the barrier."""
    lam = np.asarray(lambda2_lb, dtype=float)
    if np.any(lam <= cfg.epsilon):
        raise BarrierViolation(float(np.min(lam)), cfg.epsilon)
    gap = lam - cfg.epsilon
    return cfg.k_c / gap, -cfg.k_c / gap**2, 2.0 * cfg.k_c / gap**3


def rank1_hessian(ev: MetricEvaluation, gradient, cfg: ConnectivityConfig) -> Rank1Hessian:
    a = np.concatenate([np.ravel(g) for g in gradient]) if isinstance(gradient, (list, tuple)) else np.ravel(gradient)
    j, j_l, j_ll = barrier_derivatives(ev.lambda2_lb, cfg)
    return Rank1Hessian(curvature=float(j_ll), a=a, linear=float(j_l) * a, constant=float(j))
