"""Synthetic fixtures with known ground truth.

The planes fixture places each class on its own random 2-D plane in a
higher-dimensional space, samples a bounded patch, and adds isotropic
noise, so tests can measure orthogonal residuals against the true
geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import ActionLayout, EncodedDataset, discretize_action


@dataclass(frozen=True)
class PlaneTruth:
    """A ground-truth plane: orthonormal 2 x d basis rows plus an offset."""

    basis: np.ndarray
    offset: np.ndarray

    def residual(self, x) -> float:
        """Orthogonal distance of x to the plane."""
        diff = np.asarray(x, dtype=np.float64) - self.offset
        in_span = self.basis.T @ (self.basis @ diff)
        return float(np.linalg.norm(diff - in_span))


def _min_principal_angle_deg(a: PlaneTruth, b: PlaneTruth) -> float:
    overlap = a.basis @ b.basis.T
    top = min(1.0, float(np.linalg.svd(overlap, compute_uv=False)[0]))
    return math.degrees(math.acos(top))


def make_planes_fixture(n_classes: int = 3, n_per_class: int = 500, d: int = 10,
                        sigma: float = 0.01, seed: int = 0,
                        min_angle_deg: float = 10.0):
    """Build the planes dataset; returns (EncodedDataset, [PlaneTruth]).

    Planes are regenerated until they are pairwise non-parallel (minimum
    principal angle above min_angle_deg) and at least 99% of points lie
    closer to their own plane than to any other class's plane.
    """
    if n_classes < 2:
        raise ValueError(f"need >= 2 classes, got {n_classes}")
    if d <= 2:
        raise ValueError(f"need ambient dimension > 2, got {d}")

    layout = ActionLayout(
        order=tuple(range(n_classes)),
        names=tuple(f"class{i}" for i in range(n_classes)),
    )
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        truths = []
        for _ in range(n_classes):
            q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
            truths.append(PlaneTruth(basis=q.T.copy(),
                                     offset=rng.normal(0.0, 1.5, size=d)))
        angles_ok = all(
            _min_principal_angle_deg(truths[i], truths[j]) > min_angle_deg
            for i in range(n_classes) for j in range(i + 1, n_classes)
        )
        if not angles_ok:
            continue

        zs, actions, labels = [], [], []
        for class_id, truth in enumerate(truths):
            coeffs = rng.uniform(-1.0, 1.0, size=(n_per_class, 2))
            noise = sigma * rng.standard_normal((n_per_class, d))
            zs.append(truth.offset + coeffs @ truth.basis + noise)
            one_hot = np.zeros(n_classes)
            one_hot[class_id] = 1.0
            for _ in range(n_per_class):
                actions.append(one_hot)
                labels.append(discretize_action(one_hot, layout))
        z = np.concatenate(zs)

        if _separation_fraction(z, labels, truths) >= 0.99:
            dataset = EncodedDataset(
                z=z, raw_actions=np.stack(actions), labels=np.array(labels),
                layout=layout, env_name="planes", seed=seed,
                action_kind="continuous",
            )
            return dataset, truths
    raise RuntimeError("could not generate a well-separated planes fixture")


def _separation_fraction(z: np.ndarray, labels, truths) -> float:
    labels = np.asarray(labels)
    own_smallest = 0
    for i in range(z.shape[0]):
        residuals = [t.residual(z[i]) for t in truths]
        if residuals[labels[i]] <= min(residuals):
            own_smallest += 1
    return own_smallest / z.shape[0]
