"""
Cluster-conditioned Gaussian modeling of negative instances and the
positive score: the minimum squared Mahalanobis distance from an instance
to any negative cluster.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from clustering import CHUNK_ROWS, FAST, REPRODUCIBLE
from errors import ClusteringError, DatasetValidationError, DimensionMismatchError, ScoreNormalizationError
from mil_dataset import BagTable, InstanceSet

logger = logging.getLogger(__name__)

EPSILON_RELATIVE = 1e-6
EPSILON_FLOOR = 1e-12
ANCHOR_PERCENTILES = (1.0, 99.0)


def regularization(covariance: np.ndarray) -> float:
    d = covariance.shape[0]
    return max(EPSILON_RELATIVE * float(np.trace(covariance)) / d, EPSILON_FLOOR)


def _factor(covariance: np.ndarray, m: int) -> np.ndarray:
    try:
        return cholesky(covariance, lower=True)
    except LinAlgError as exc:
        raise ClusteringError(f"covariance of cluster {m} is not positive definite") from exc


@dataclass(frozen=True)
class ClusterModel:
    """Per-cluster mean, regularized covariance, its lower Cholesky factor and member count."""

    means: np.ndarray
    covariances: np.ndarray
    factors: np.ndarray
    counts: np.ndarray
    epsilons: np.ndarray

    @property
    def M(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_fitted(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_statistics(cls, means, covariances, counts, epsilons) -> "ClusterModel":
        """Rebuild a model from stored (already regularized) statistics."""
        means = np.asarray(means, dtype=np.float64)
        covariances = np.asarray(covariances, dtype=np.float64)
        if means.ndim != 2 or covariances.shape != (means.shape[0], means.shape[1], means.shape[1]):
            raise DimensionMismatchError(
                f"means {means.shape} and covariances {covariances.shape} do not describe M clusters in d dims")
        factors = np.stack([_factor(cov, m) for m, cov in enumerate(covariances)])
        return cls(means, covariances, factors,
                   np.asarray(counts, dtype=np.int64), np.asarray(epsilons, dtype=np.float64))


def fit_cluster_model(points: np.ndarray, assignment: np.ndarray, M: int) -> ClusterModel:
    """Mean and population covariance (+ eps I) for each of the M clusters."""
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    if points.ndim != 2 or assignment.shape != (points.shape[0],):
        raise DimensionMismatchError(
            f"assignment {assignment.shape} does not match points {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ClusteringError("cannot fit cluster statistics to non-finite points")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= M):
        raise ClusteringError(f"assignment refers to clusters outside [0, {M})")

    d = points.shape[1]
    means = np.empty((M, d))
    covariances = np.empty((M, d, d))
    counts = np.bincount(assignment, minlength=M).astype(np.int64)
    epsilons = np.empty(M)
    for m in range(M):
        if counts[m] == 0:
            raise ClusteringError(f"cluster {m} has no members")
        members = points[assignment == m]
        mean = members.mean(axis=0)
        centred = members - mean
        cov = centred.T @ centred / counts[m]
        cov = (cov + cov.T) / 2
        epsilons[m] = regularization(cov)
        means[m] = mean
        covariances[m] = cov + epsilons[m] * np.eye(d)

    return ClusterModel.from_statistics(means, covariances, counts, epsilons)


def cluster_distances(model: ClusterModel, points: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of every point to every cluster, shape (n, M)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != model.d:
        raise DimensionMismatchError(f"model has d={model.d}, points have d={points.shape[1]}")
    out = np.empty((points.shape[0], model.M))
    for m in range(model.M):
        # ||L^{-1}(z - mu)||^2 == (z - mu)^T Sigma^{-1} (z - mu)
        y = solve_triangular(model.factors[m], (points - model.means[m]).T, lower=True, check_finite=False)
        out[:, m] = np.einsum("ij,ij->j", y, y)
    return out


def positive_score(model: ClusterModel, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d,):
        raise DimensionMismatchError(f"expected a {model.d}-vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ClusteringError("cannot score a query vector with non-finite values")
    return float(cluster_distances(model, z[None, :]).min())


def score_points(model: ClusterModel, points: np.ndarray, mode: str = REPRODUCIBLE) -> np.ndarray:
    """positive_score for every row, chunked (threaded in fast mode)."""
    points = np.asarray(points, dtype=np.float64)
    blocks = [points[s:s + CHUNK_ROWS] for s in range(0, points.shape[0], CHUNK_ROWS)]
    if mode == FAST and len(blocks) > 1:
        with ThreadPoolExecutor() as pool:
            parts = list(pool.map(lambda block: cluster_distances(model, block).min(axis=1), blocks))
    else:
        parts = [cluster_distances(model, block).min(axis=1) for block in blocks]
    return np.concatenate(parts)


@dataclass(frozen=True)
class ScoreSet:
    instance_scores: np.ndarray
    bag_scores: np.ndarray
    anchors: Tuple[float, float]


def pool_bag_scores(instance_scores: np.ndarray, bags: BagTable, method: str = "mean") -> np.ndarray:
    """Aggregate instance scores per bag; mean pooling uses an exactly rounded sum."""
    out = np.empty(len(bags))
    for b, bag in enumerate(bags):
        if bag.size == 0:
            raise DatasetValidationError(f"bag {bag.bag_id} is empty")
        member_scores = instance_scores[bag.indices]
        if method == "mean":
            out[b] = math.fsum(member_scores) / bag.size
        elif method == "max":
            out[b] = float(member_scores.max())
        else:
            raise ValueError(f"unknown pooling method {method!r}")
    return out


def score_anchors(scores: np.ndarray) -> Tuple[float, float]:
    lo, hi = np.percentile(scores, ANCHOR_PERCENTILES)
    return float(lo), float(hi)


def score_dataset(model: ClusterModel, instances: InstanceSet, bags: BagTable,
                  mode: str = REPRODUCIBLE) -> ScoreSet:
    if instances.d != model.d:
        raise DimensionMismatchError(f"model has d={model.d}, instances have d={instances.d}")
    scores = score_points(model, instances.features, mode)
    scores.setflags(write=False)
    bag_scores = pool_bag_scores(scores, bags, "mean")
    bag_scores.setflags(write=False)
    return ScoreSet(scores, bag_scores, score_anchors(scores))


def normalize_scores(scores: np.ndarray, anchors: Tuple[float, float]) -> np.ndarray:
    """Map [lo, hi] onto [0, 1], clamping outside."""
    lo, hi = anchors
    if not hi > lo:
        raise ScoreNormalizationError(f"normalization anchors lo={lo}, hi={hi} do not span a positive range")
    return np.clip((np.asarray(scores, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
