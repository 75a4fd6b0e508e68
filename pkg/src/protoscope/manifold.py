"""Piecewise-linear charts and the manifold-based pairwise similarity.

Charts are local m-dimensional linear patches grown greedily around
random anchors: neighbors are admitted in order of distance as long as
every current member keeps reconstruction quality >= T on the refitted
basis. The similarity between two points decays with the orthogonal
distance o to the partner's chart (exponent N_alpha) and the in-span
projected distance p (exponent N_beta), symmetrized over both
directions; N_alpha > N_beta makes off-manifold offsets count more.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, DegenerateNeighborhood, ShapeError
from .numkit import OrthonormalBasis, principal_basis, project_onto
from .textio import write_blocks


@dataclass
class SimilarityParams:
    """Chart-growth and similarity-decay parameters."""

    N_alpha: float = 4.0
    N_beta: float = 0.5
    T: float = 0.9
    m: int = 3
    n_anchors: int | None = None
    k_max_neighbors: int | None = None

    def __post_init__(self):
        if not 0.0 < self.T <= 1.0:
            raise ValueError(f"T must lie in (0, 1], got {self.T}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.N_alpha <= self.N_beta:
            warnings.warn(
                f"N_alpha={self.N_alpha} <= N_beta={self.N_beta}: off-manifold "
                "offsets no longer decay faster than in-plane ones",
                stacklevel=2,
            )

    def resolved_anchors(self, n_points: int) -> int:
        if self.n_anchors is not None:
            return min(self.n_anchors, n_points)
        return min(max(8, math.ceil(n_points / 8)), n_points)

    def resolved_k_max(self, n_points: int) -> int:
        if self.k_max_neighbors is not None:
            return min(self.k_max_neighbors, n_points - 1)
        return min(32, n_points - 1)


@dataclass(frozen=True)
class Chart:
    """A local linear patch: anchor, accepted members, fitted basis."""

    anchor_index: int
    member_indices: frozenset
    basis: OrthonormalBasis


@dataclass
class ChartSet:
    """All charts of a batch plus the point -> chart assignment."""

    charts: list
    assignment: np.ndarray

    def chart_of(self, point_index: int) -> Chart:
        return self.charts[self.assignment[point_index]]


def reconstruction_quality(x, chart: Chart) -> float:
    """In-span fraction of the centered norm, in [0, 1].

    Equals the cosine of the angle between (x - centroid) and the chart
    subspace; 1.0 when x coincides with the centroid. Scale-invariant in
    (x - centroid).
    """
    return _quality(np.asarray(x, dtype=np.float64), chart.basis)


def _quality(x: np.ndarray, basis: OrthonormalBasis) -> float:
    diff = x - basis.centroid
    denom = float(np.linalg.norm(diff))
    if denom == 0.0:
        return 1.0
    res = project_onto(x, basis.centroid, basis)
    return min(1.0, res.projected_dist / denom)


def _grow_chart(pts: np.ndarray, anchor: int, params: SimilarityParams,
                k_max: int) -> Chart | None:
    """Grow one anchor's member set; None when no valid basis exists."""
    m = params.m
    dists = np.linalg.norm(pts - pts[anchor], axis=1)
    order = np.argsort(dists, kind="stable")
    neighbors = [int(i) for i in order if i != anchor][:k_max]

    members = [anchor] + neighbors[: m - 1]
    basis = None
    for cand in neighbors[m - 1:]:
        trial = sorted(members + [cand])
        try:
            trial_basis = principal_basis(pts[trial], m)
        except DegenerateNeighborhood:
            break  # rank collapsed; stop growing this anchor
        if all(_quality(pts[i], trial_basis) >= params.T for i in trial):
            members = trial
            basis = trial_basis
    if basis is None:
        return None
    # Refit on the accepted set (canonical ascending order, same as the
    # last accepted trial, so member quality >= T still holds).
    final = principal_basis(pts[sorted(members)], m)
    return Chart(anchor_index=anchor, member_indices=frozenset(members), basis=final)


def build_charts(points, params: SimilarityParams, seed: int) -> ChartSet:
    """Build seeded anchor charts and assign every point to its nearest anchor."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"expected a 2-D point array, got ndim={pts.ndim}")
    n = pts.shape[0]
    if n < params.m + 1:
        raise DegenerateBatch(f"{n} points cannot support m={params.m} charts")

    rng = np.random.default_rng(seed)
    anchors = rng.choice(n, size=params.resolved_anchors(n), replace=False)
    k_max = params.resolved_k_max(n)

    charts = []
    for anchor in anchors:
        chart = _grow_chart(pts, int(anchor), params, k_max)
        if chart is not None:
            charts.append(chart)
    if not charts:
        raise DegenerateBatch("all anchors degenerate")

    anchor_points = np.stack([pts[c.anchor_index] for c in charts])
    # nearest anchor; ties break to the earliest surviving chart
    d2 = ((pts[:, None, :] - anchor_points[None, :, :]) ** 2).sum(axis=2)
    assignment = np.argmin(d2, axis=1)
    return ChartSet(charts=charts, assignment=assignment)


def _directed(z_from: np.ndarray, z_to: np.ndarray, basis: OrthonormalBasis,
              params: SimilarityParams) -> float:
    res = project_onto(z_from, z_to, basis)
    alpha = (1.0 + res.orthogonal_dist**2) ** (-params.N_alpha)
    beta = (1.0 + res.projected_dist) ** (-params.N_beta)
    return alpha * beta


def similarity(i: int, j: int, points, charts: ChartSet,
               params: SimilarityParams) -> float:
    """Symmetrized manifold similarity between points i and j, in (0, 1]."""
    pts = np.asarray(points, dtype=np.float64)
    forward = _directed(pts[i], pts[j], charts.chart_of(j).basis, params)
    backward = _directed(pts[j], pts[i], charts.chart_of(i).basis, params)
    return 0.5 * (forward + backward)


def _directed_columns(pts: np.ndarray, charts: ChartSet,
                      params: SimilarityParams, cols, out: np.ndarray) -> None:
    for j in cols:
        basis = charts.chart_of(j).basis.vectors
        diff = pts - pts[j]
        in_span = (diff @ basis.T) @ basis
        o2 = ((diff - in_span) ** 2).sum(axis=1)
        p = np.sqrt((in_span**2).sum(axis=1))
        out[:, j] = (1.0 + o2) ** (-params.N_alpha) * (1.0 + p) ** (-params.N_beta)


def pairwise_similarity(points, charts: ChartSet, params: SimilarityParams,
                        workers: int = 1) -> np.ndarray:
    """Full N x N similarity matrix; symmetric with unit diagonal.

    Columns are independent, so worker threads write disjoint slices and
    the result is identical for any worker count.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    directed = np.empty((n, n))
    if workers <= 1 or n < 4:
        _directed_columns(pts, charts, params, range(n), directed)
    else:
        blocks = np.array_split(np.arange(n), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_directed_columns, pts, charts, params, block, directed)
                for block in blocks if block.size
            ]
            for future in futures:
                future.result()
    return 0.5 * (directed + directed.T)


def save_charts(chartset: ChartSet, path) -> None:
    """Debug dump of anchors, member indices and bases."""
    arrays = {}
    ints = {"assignment": chartset.assignment}
    for k, chart in enumerate(chartset.charts):
        arrays[f"basis_{k}"] = chart.basis.vectors
        arrays[f"centroid_{k}"] = chart.basis.centroid
        ints[f"members_{k}"] = np.array(sorted(chart.member_indices))
        ints[f"anchor_{k}"] = np.array([chart.anchor_index])
    write_blocks(path, "charts", {"n_charts": len(chartset.charts)}, arrays, ints)
