"""Clustering-based gate initialization.

The expert count is fixed by clustering the base model's embeddings:
k-means centroids define a soft assignment of every training sample to
every expert, which later supervises both the gate fit and the per-expert
sample weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import softmax
from .seeding import derive_rng


@dataclass(frozen=True)
class Centroids:
    """K cluster centers in the embedding space."""

    means: np.ndarray  # [K, dim]
    inertia_history: tuple[float, ...] = ()  # within-cluster SSE after each Lloyd update

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class InitialGate:
    """Row-stochastic soft assignment of samples to experts, plus its temperature."""

    weights: np.ndarray  # [N, K]
    temperature: float

    @property
    def num_experts(self) -> int:
        return self.weights.shape[1]


def _sq_distances(points: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, [N, K]."""
    diff = points[:, None, :] - means[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared-distance sampling."""
    n = points.shape[0]
    means = np.empty((k, points.shape[1]))
    means[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for j in range(1, k):
        dist = np.einsum("nd,nd->n", points - means[j - 1], points - means[j - 1])
        closest = np.minimum(closest, dist)
        total = closest.sum()
        if total <= 0:
            means[j] = points[rng.integers(n)]  # all points coincide with a center
        else:
            means[j] = points[rng.choice(n, p=closest / total)]
    return means


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> Centroids:
    """Lloyd's algorithm with k-means++ seeding, deterministic given seed.

    Stops when the largest centroid shift drops below tol or after
    max_iters updates.  A cluster that empties is re-seeded to the point
    farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"points must be [N, dim], got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")

    rng = derive_rng(seed, "kmeans")
    means = _plus_plus_seeds(points, k, rng)
    history: list[float] = []
    for _ in range(max_iters):
        dists = _sq_distances(points, means)
        assign = dists.argmin(axis=1)
        point_dist = dists[np.arange(n), assign]
        new_means = means.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_means[j] = points[members].mean(axis=0)
            else:
                far = int(point_dist.argmax())
                new_means[j] = points[far]
                point_dist = point_dist.copy()
                point_dist[far] = 0.0  # don't hand the same point to two empty clusters
        shift = np.sqrt(((new_means - means) ** 2).sum(axis=1)).max()
        means = new_means
        history.append(float(_sq_distances(points, means).min(axis=1).sum()))
        if shift < tol:
            break
    return Centroids(means=means, inertia_history=tuple(history))


def median_sq_distance(centroids: Centroids) -> float:
    """Median pairwise squared distance between centroids; the default temperature."""
    if centroids.k < 2:
        return 1.0
    dists = _sq_distances(centroids.means, centroids.means)
    upper = dists[np.triu_indices(centroids.k, k=1)]
    value = float(np.median(upper))
    return value if value > 0 else 1.0


def initial_gate(
    embeddings: np.ndarray, centroids: Centroids, temperature: float | None = None
) -> InitialGate:
    """Soft assignment: softmax over experts of -||z - c_k||^2 / temperature.

    temperature=None uses the median pairwise squared centroid distance.
    Rows are stochastic by construction; as temperature -> 0 the rows
    approach one-hot nearest-centroid assignments.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != centroids.dim:
        raise ShapeError(
            f"embeddings must be [N, {centroids.dim}], got shape {embeddings.shape}"
        )
    if temperature is None:
        temperature = median_sq_distance(centroids)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = -_sq_distances(embeddings, centroids.means) / temperature
    return InitialGate(weights=softmax(scores), temperature=float(temperature))


def smooth_weights(weights: np.ndarray, floor: float) -> np.ndarray:
    """Clip soft-assignment weights into [floor, 1]; rows are NOT renormalized.

    The floor keeps every expert exposed to a trickle of every sample so
    no expert trains on a degenerate single-cluster distribution.
    """
    if not 0 <= floor <= 1:
        raise ValueError(f"floor must lie in [0, 1], got {floor}")
    return np.clip(weights, floor, 1.0)


def per_class_assignment(
    gate: InitialGate, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse a soft per-sample assignment to one expert per class.

    Each class goes to the expert with the highest mean soft weight over
    that class's samples (ties pick the lower expert index).  Returns the
    [C] class-to-expert map and its one-hot [N, K] expansion.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (gate.weights.shape[0],):
        raise ShapeError("labels must be 1-d with one entry per gate row")
    num_classes = int(labels.max()) + 1
    class_map = np.empty(num_classes, dtype=np.int64)
    for cls in range(num_classes):
        members = labels == cls
        if not members.any():
            raise ValueError(f"class {cls} has no samples")
        class_map[cls] = int(gate.weights[members].mean(axis=0).argmax())
    onehot = np.zeros_like(gate.weights)
    onehot[np.arange(len(labels)), class_map[labels]] = 1.0
    return class_map, onehot
