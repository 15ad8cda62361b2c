"""Graph Laplacians, edge weights and a cyclic Jacobi symmetric eigensolver.

The eigensolver works on stacks of matrices (shape ``(..., n, n)``) so the
metric can evaluate every timestep of a trajectory, or every Monte Carlo
sample, in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError

SYMMETRY_TOL = 1e-9
OFFDIAG_TOL = 1e-12
MAX_SWEEPS = 100
DEGENERACY_TOL = 1e-9


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph on ``n`` nodes with edge weights in [0, 1]."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DomainError(f"weights must be square, got shape {w.shape}")
        if not np.allclose(w, w.T, atol=SYMMETRY_TOL, rtol=0.0):
            raise DomainError("edge weights must be symmetric")
        if np.any(np.abs(np.diag(w)) > 0.0):
            raise DomainError("edge weights must have a zero diagonal")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise DomainError("edge weights must lie in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LaplacianSpectrum:
    """Ascending eigenvalues with orthonormal eigenvectors as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def lambda2(self) -> float:
        return float(self.eigenvalues[1])

    @property
    def fiedler_vector(self) -> np.ndarray:
        return self.eigenvectors[:, 1]


def binary_edge_weight(distance, delta):
    """Disk-model edge weight: 1 within communication range, else 0."""
    distance = np.asarray(distance, dtype=float)
    if delta <= 0:
        raise DomainError(f"communication range must be positive, got {delta}")
    if np.any(distance < 0):
        raise DomainError("distance must be non-negative")
    w = (distance <= delta).astype(float)
    return float(w) if w.ndim == 0 else w


def smooth_edge_weight(distance_measure, delta0, delta):
    """Cosine-windowed edge weight, flat at 1 up to ``delta0`` and 0 past ``delta``."""
    if not 0 < delta0 < delta:
        raise DomainError(f"need 0 < delta0 < delta, got delta0={delta0}, delta={delta}")
    lb = np.asarray(distance_measure, dtype=float)
    if np.any(lb < 0):
        raise DomainError("distance measure must be non-negative")
    band = 0.5 + 0.5 * np.cos(np.pi * (lb - delta0) / (delta - delta0))
    w = np.where(lb <= delta0, 1.0, np.where(lb <= delta, band, 0.0))
    return float(w) if w.ndim == 0 else w


def smooth_edge_weight_slope(distance_measure, delta0, delta):
    """Derivative of :func:`smooth_edge_weight` with respect to the distance measure."""
    lb = np.asarray(distance_measure, dtype=float)
    width = delta - delta0
    slope = -np.pi / (2.0 * width) * np.sin(np.pi * (lb - delta0) / width)
    return np.where((lb > delta0) & (lb <= delta), slope, 0.0)


def laplacian_from_weights(weights: np.ndarray) -> np.ndarray:
    """``diag(row sums) - weights``, batched over leading axes."""
    w = np.asarray(weights, dtype=float)
    lap = -w.copy()
    idx = np.arange(w.shape[-1])
    lap[..., idx, idx] = w.sum(axis=-1) - w[..., idx, idx]
    return lap


def laplacian(graph: WeightedGraph) -> np.ndarray:
    return laplacian_from_weights(graph.weights)


def _offdiag_norm(a: np.ndarray) -> np.ndarray:
    off = a.copy()
    idx = np.arange(a.shape[-1])
    off[..., idx, idx] = 0.0
    return np.sqrt(np.sum(off * off, axis=(-2, -1)))


def jacobi_eigh(m: np.ndarray, tol: float = OFFDIAG_TOL, max_sweeps: int = MAX_SWEEPS):
    """Cyclic Jacobi eigendecomposition of a stack of symmetric matrices.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending along
    the last axis and eigenvectors stored column-wise, matching the layout of
    ``numpy.linalg.eigh``.  Each eigenvector is sign-normalised so that its
    largest-magnitude entry is positive.
    """
    a = np.array(m, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DomainError(f"expected square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix has non-finite entries")
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    if asym > SYMMETRY_TOL:
        raise DomainError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    a = a.reshape((-1, n, n))
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    scale = np.maximum(1.0, np.sqrt(np.sum(a * a, axis=(-2, -1))))
    pairs = [(p, q) for p in range(n - 1) for q in range(p + 1, n)]

    for _ in range(max_sweeps + 1):
        off = _offdiag_norm(a)
        active = off >= tol * scale
        if not np.any(active):
            break
        # only rotate the matrices that have not converged yet
        sel = np.nonzero(active)[0]
        sa, sv = a[sel], v[sel]
        for p, q in pairs:
            apq = sa[:, p, q]
            nz = np.abs(apq) > 0.0
            if not np.any(nz):
                continue
            safe_apq = np.where(nz, apq, 1.0)
            theta = (sa[:, q, q] - sa[:, p, p]) / (2.0 * safe_apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(nz, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c_ = c[:, None]
            s_ = s[:, None]
            # columns p, q
            ap = sa[:, :, p].copy()
            aq = sa[:, :, q]
            sa[:, :, p] = c_ * ap - s_ * aq
            sa[:, :, q] = s_ * ap + c_ * aq
            # rows p, q
            ap = sa[:, p, :].copy()
            aq = sa[:, q, :]
            sa[:, p, :] = c_ * ap - s_ * aq
            sa[:, q, :] = s_ * ap + c_ * aq
            sa[:, p, q] = 0.0
            sa[:, q, p] = 0.0
            vp = sv[:, :, p].copy()
            vq = sv[:, :, q]
            sv[:, :, p] = c_ * vp - s_ * vq
            sv[:, :, q] = s_ * vp + c_ * vq
        a[sel], v[sel] = sa, sv
    else:
        raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")

    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    rows = np.argmax(np.abs(v), axis=-2)
    signs = np.sign(np.take_along_axis(v, rows[:, None, :], axis=-2))
    signs[signs == 0] = 1.0
    v = v * signs
    return w.reshape(batch_shape + (n,)), v.reshape(batch_shape + (n, n))


def symmetric_eigendecomposition(m) -> LaplacianSpectrum:
    w, v = jacobi_eigh(np.asarray(m, dtype=float))
    if w.ndim != 1:
        raise DomainError("symmetric_eigendecomposition expects a single matrix")
    return LaplacianSpectrum(eigenvalues=w, eigenvectors=v)


def lambda2_from_weights(weights: np.ndarray) -> np.ndarray:
    """Second-smallest Laplacian eigenvalue for a stack of weight matrices."""
    w, _ = jacobi_eigh(laplacian_from_weights(weights))
    return w[..., 1]


def is_degenerate(eigenvalues: np.ndarray) -> np.ndarray:
    """True where lambda2 has multiplicity > 1 (|lambda3 - lambda2| < tol)."""
    ev = np.asarray(eigenvalues)
    if ev.shape[-1] < 3:
        return np.zeros(ev.shape[:-1], dtype=bool)
    return np.abs(ev[..., 2] - ev[..., 1]) < DEGENERACY_TOL


def algebraic_connectivity(graph: WeightedGraph):
    """Return ``(lambda2, fiedler_vector, degenerate)`` of the graph Laplacian."""
    spec = symmetric_eigendecomposition(laplacian(graph))
    lam2 = max(spec.lambda2, 0.0)
    return lam2, spec.fiedler_vector, bool(is_degenerate(spec.eigenvalues))
