"""Deterministic numerical primitives.

Top-m principal bases, affine subspace projections, and a small
bias-corrected adaptive-moment optimizer. Everything here is plain
numpy on float64 and is deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNeighborhood, NumericalError, ShapeError


@dataclass(frozen=True)
class OrthonormalBasis:
    """An m-dimensional orthonormal basis anchored at a centroid.

    ``vectors`` is an m x d matrix whose rows are unit-norm and pairwise
    orthogonal; ``centroid`` is the mean of the points the basis was
    fitted on.
    """

    vectors: np.ndarray
    centroid: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ProjectionResult:
    """Decomposition of a point relative to an affine subspace."""

    projected_point: np.ndarray
    orthogonal_dist: float
    projected_dist: float


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its first nonzero coordinate is positive."""
    out = vectors.copy()
    for row in out:
        nonzero = np.flatnonzero(np.abs(row) > 1e-12)
        if nonzero.size and row[nonzero[0]] < 0:
            row *= -1.0
    return out


def principal_basis(points, m: int) -> OrthonormalBasis:
    """Fit the top-m principal directions of a point cloud.

    Returns the centroid and the m leading right singular vectors of the
    centered points. Raises DegenerateNeighborhood when there are fewer
    than m points or the centered cloud has rank below m (no silent
    padding with arbitrary directions).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"expected a 2-D point array, got ndim={pts.ndim}")
    n, d = pts.shape
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if m > d:
        raise ShapeError(f"m={m} exceeds ambient dimension d={d}")
    if n < m:
        raise DegenerateNeighborhood(f"{n} points cannot support an m={m} basis")

    centroid = pts.mean(axis=0)
    centered = pts - centroid
    # SVD of the centered cloud; rows of vt are principal directions.
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (sing[0] if sing.size else 0.0)
    rank = int(np.sum(sing > tol))
    if rank < m:
        raise DegenerateNeighborhood(
            f"centered points have rank {rank} < m={m}"
        )
    return OrthonormalBasis(vectors=_fix_signs(vt[:m]), centroid=centroid)


def project_onto(x, base_point, basis: OrthonormalBasis) -> ProjectionResult:
    """Project x onto the affine subspace through base_point spanned by basis.

    projected_point = base_point + sum_k <x - base_point, v_k> v_k, with
    orthogonal_dist the residual norm and projected_dist the in-span norm.
    """
    x = np.asarray(x, dtype=np.float64)
    base = np.asarray(base_point, dtype=np.float64)
    if x.shape != base.shape or x.shape != (basis.ambient_dim,):
        raise ShapeError(
            f"dimension mismatch: x {x.shape}, base {base.shape}, "
            f"basis ambient {basis.ambient_dim}"
        )
    diff = x - base
    coeffs = basis.vectors @ diff
    in_span = basis.vectors.T @ coeffs
    projected = base + in_span
    return ProjectionResult(
        projected_point=projected,
        orthogonal_dist=float(np.linalg.norm(diff - in_span)),
        projected_dist=float(np.linalg.norm(in_span)),
    )


@dataclass
class MomentOptimizer:
    """First-order optimizer with bias-corrected running moments.

    Decay constants are fixed at (0.9, 0.999) with a 1e-8 floor; only the
    step size is scheduled externally.
    """

    step_size: float
    decay1: float = 0.9
    decay2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, params: dict, grads: dict) -> dict:
        """Apply one update; returns new parameter arrays.

        Moment buffers are keyed by parameter name and always match the
        parameter shapes. Non-finite gradients raise NumericalError.
        """
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for '{name}'")
            if np.shape(g) != np.shape(params[name]):
                raise ShapeError(
                    f"gradient shape {np.shape(g)} != param shape "
                    f"{np.shape(params[name])} for '{name}'"
                )
        self.step_count += 1
        t = self.step_count
        updated = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p, dtype=np.float64)
                v = np.zeros_like(p, dtype=np.float64)
            m = self.decay1 * m + (1.0 - self.decay1) * g
            v = self.decay2 * v + (1.0 - self.decay2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - self.decay1**t)
            v_hat = v / (1.0 - self.decay2**t)
            updated[name] = p - self.step_size * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return updated


def opt_step(opt: MomentOptimizer, params: dict, grads: dict) -> dict:
    """Functional alias for MomentOptimizer.step."""
    return opt.step(params, grads)
