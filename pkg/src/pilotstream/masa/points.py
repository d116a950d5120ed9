"""Streaming K-Means: payload parsing, scoring, decayed model updates.

The model is a set of weighted centroids. Each mini-batch is scored
against the current centroids (nearest squared Euclidean, ties to the
lowest index) and folded in through weight-blended means with a decay
factor: alpha=1 accumulates forever, alpha=0 forgets everything but the
latest batch.

Updates go through per-cluster sufficient statistics (mass, coordinate
sums), so partial statistics from concurrently processed partitions can
be added together before one model update; the result is independent of
how the batch was partitioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, MalformedPayload


def parse_points(payload: bytes) -> np.ndarray:
    """Decode the ASCII point format: header `n,d`, then n lines of d
    comma-separated decimals. Returns an (n, d) float64 array."""
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"not ASCII: {exc}") from None
    head, sep, body = text.partition("\n")
    if not sep:
        raise MalformedPayload("missing header line")
    parts = head.split(",")
    if len(parts) != 2:
        raise MalformedPayload(f"bad header {head!r}")
    try:
        n, d = int(parts[0]), int(parts[1])
    except ValueError:
        raise MalformedPayload(f"bad header {head!r}") from None
    if n < 1 or d < 1:
        raise MalformedPayload(f"bad dimensions {n}x{d}")
    values = body.replace("\n", ",").rstrip(",").split(",")
    if len(values) != n * d:
        raise MalformedPayload(f"expected {n * d} values, found {len(values)}")
    try:
        arr = np.array(values, dtype=np.float64)
    except ValueError:
        raise MalformedPayload("non-numeric coordinate") from None
    if not np.isfinite(arr).all():
        raise MalformedPayload("non-finite coordinate")
    return arr.reshape(n, d)


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (c, d)
    weights: np.ndarray  # (c,) effective point counts
    decay: float = 1.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise DimensionMismatch("centroids must be a (c, d) matrix")
        if self.weights.shape != (self.centroids.shape[0],):
            raise DimensionMismatch("one weight per centroid required")
        if (self.weights < 0).any():
            raise DimensionMismatch("weights must be non-negative")

    @property
    def num_centroids(self) -> int:
        return self.centroids.shape[0]

    @property
    def dims(self) -> int:
        return self.centroids.shape[1]

    def copy(self) -> "KMeansModel":
        return KMeansModel(self.centroids.copy(), self.weights.copy(), self.decay)


def _check_batch(model: KMeansModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.dims:
        raise DimensionMismatch(
            f"batch shape {batch.shape} incompatible with {model.dims}-d centroids"
        )
    return batch


def kmeans_score(model: KMeansModel, batch: np.ndarray) -> tuple[np.ndarray, float]:
    """Assign each point to its nearest centroid (squared Euclidean, ties
    to the lowest index); cost is the sum of those squared distances."""
    batch = _check_batch(model, batch)
    d2 = ((batch[:, None, :] - model.centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = np.argmin(d2, axis=1)
    cost = float(np.sum(np.min(d2, axis=1)))
    return assignments, cost


def sufficient_stats(
    model: KMeansModel, batch: np.ndarray, assignments: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster mass and coordinate sums; additive across splits of the
    same batch."""
    batch = _check_batch(model, batch)
    c = model.num_centroids
    mass = np.bincount(assignments, minlength=c).astype(np.float64)
    sums = np.zeros((c, model.dims))
    for j in range(c):
        members = batch[assignments == j]
        if len(members):
            sums[j] = members.sum(axis=0)
    return mass, sums


def update_from_stats(model: KMeansModel, mass: np.ndarray, sums: np.ndarray) -> KMeansModel:
    """Decayed weight-blended update:
    w' = alpha*w + m;  centroid' = (alpha*w*centroid + sums) / w' when w' > 0."""
    alpha = model.decay
    w = alpha * model.weights
    w_new = w + mass
    centroids = model.centroids.copy()
    nz = w_new > 0
    centroids[nz] = (w[nz, None] * model.centroids[nz] + sums[nz]) / w_new[nz, None]
    return KMeansModel(centroids, w_new, alpha)


def kmeans_update(
    model: KMeansModel, batch: np.ndarray, assignments: np.ndarray
) -> KMeansModel:
    """Fold one scored batch into the model; returns the updated model."""
    mass, sums = sufficient_stats(model, batch, assignments)
    return update_from_stats(model, mass, sums)


def farthest_point_init(points: np.ndarray, c: int) -> np.ndarray:
    """Deterministic seeding: start from the lexicographically smallest
    point, then repeatedly add the point farthest from the chosen set
    (distance ties broken lexicographically). Depends only on the point
    multiset, not its order."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise DimensionMismatch("need a non-empty (n, d) point matrix")

    def lex_first(candidates: np.ndarray) -> int:
        order = np.lexsort(points[candidates].T[::-1])
        return int(candidates[order[0]])

    first = lex_first(np.arange(len(points)))
    chosen = [points[first]]
    d2 = ((points - points[first]) ** 2).sum(axis=1)
    while len(chosen) < c:
        far = np.flatnonzero(d2 == d2.max())
        pick = lex_first(far)
        chosen.append(points[pick])
        d2 = np.minimum(d2, ((points - points[pick]) ** 2).sum(axis=1))
    return np.array(chosen)
