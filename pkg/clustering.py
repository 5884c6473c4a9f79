"""
K-means over negative-bag instances: k-means++ seeding, Lloyd iterations,
farthest-point repair of empty clusters.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import ClusteringError, DimensionMismatchError

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
RELATIVE_TOLERANCE = 1e-4
# rows per distance block; bounds the n x M x d temporary
CHUNK_ROWS = 4096

REPRODUCIBLE = "reproducible"
FAST = "fast"


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: Tuple[float, ...]

    @property
    def M(self) -> int:
        return self.centroids.shape[0]


def _nearest_block(block: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # explicit differences, not the |x|^2 - 2xc + |c|^2 expansion, so ties stay exact
    sq = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(sq, axis=1)  # first minimum -> lowest cluster index
    return labels, sq[np.arange(block.shape[0]), labels]


def assign_points(points: np.ndarray, centroids: np.ndarray,
                  mode: str = REPRODUCIBLE) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and squared distances."""
    starts = range(0, points.shape[0], CHUNK_ROWS)
    blocks = [points[s:s + CHUNK_ROWS] for s in starts]
    if mode == FAST and len(blocks) > 1:
        with ThreadPoolExecutor() as pool:
            parts = list(pool.map(lambda b: _nearest_block(b, centroids), blocks))
    else:
        parts = [_nearest_block(b, centroids) for b in blocks]
    labels = np.concatenate([p[0] for p in parts])
    sq = np.concatenate([p[1] for p in parts])
    return labels, sq


def _update_centroids(points: np.ndarray, labels: np.ndarray, M: int, mode: str) -> np.ndarray:
    counts = np.bincount(labels, minlength=M).astype(np.float64)
    if mode == FAST:
        one_hot = np.zeros((points.shape[0], M))
        one_hot[np.arange(points.shape[0]), labels] = 1.0
        sums = one_hot.T @ points
    else:
        sums = np.zeros((M, points.shape[1]))
        for m in range(M):
            sums[m] = points[labels == m].sum(axis=0)
    return sums / counts[:, None]


def _repair_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray,
                  sq: np.ndarray) -> int:
    """Move each empty cluster onto the point farthest from its centroid (in place)."""
    M = centroids.shape[0]
    repaired = 0
    for m in range(M):
        if np.any(labels == m):
            continue
        counts = np.bincount(labels, minlength=M)
        # only steal from clusters that keep at least one member
        candidates = np.flatnonzero(counts[labels] > 1)
        far = candidates[np.argmax(sq[candidates])]
        centroids[m] = points[far]
        labels[far] = m
        sq[far] = 0.0
        repaired += 1
    return repaired


def kmeans_plus_plus(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centre uniform, then proportional to squared distance."""
    n = points.shape[0]
    centroids = np.empty((M, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, M):
        total = closest.sum()
        if total <= 0.0:
            raise ClusteringError(f"only {k} distinct points available for {M} clusters; lower --clusters")
        idx = rng.choice(n, p=closest / total)
        centroids[k] = points[idx]
        closest = np.minimum(closest, ((points - centroids[k]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, M: int, seed: int = 0,
           init_centroids: Optional[np.ndarray] = None,
           max_iterations: int = MAX_ITERATIONS,
           tolerance: float = RELATIVE_TOLERANCE,
           mode: str = REPRODUCIBLE) -> KMeansResult:
    """Lloyd's algorithm from k-means++ (or given) centroids.

    Stops when the largest centroid shift falls below `tolerance` times the
    data diameter (bounding-box diagonal) or after `max_iterations`.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionMismatchError(f"points must be 2-D, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ClusteringError("points contain NaN or infinite values")
    n = points.shape[0]
    if M < 1:
        raise ClusteringError(f"cluster count must be >= 1, got {M}")
    if n < M:
        raise ClusteringError(f"{n} points cannot form {M} clusters; lower --clusters to at most {n}")
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < M:
        raise ClusteringError(f"only {distinct} distinct points for {M} clusters; lower --clusters")

    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=np.float64)
        if centroids.shape != (M, points.shape[1]):
            raise DimensionMismatchError(f"init_centroids must have shape {(M, points.shape[1])}")
    else:
        centroids = kmeans_plus_plus(points, M, np.random.default_rng(seed))

    diameter = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    threshold = tolerance * diameter
    history: List[float] = []

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        labels, sq = assign_points(points, centroids, mode)
        if _repair_empty(points, centroids, labels, sq):
            logger.debug("k-means iteration %d: reseeded empty clusters", iterations)
        history.append(float(sq.sum()))

        updated = _update_centroids(points, labels, M, mode)
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if shift <= threshold:
            break

    labels, sq = assign_points(points, centroids, mode)
    _repair_empty(points, centroids, labels, sq)
    inertia = float(sq.sum())
    history.append(inertia)

    centroids.setflags(write=False)
    labels.setflags(write=False)
    return KMeansResult(centroids, labels, inertia, iterations, tuple(history))
