"""
Evaluation metrics: ROC AUC (midrank Mann-Whitney), Youden threshold,
bag accuracy and an instance-level FROC.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from clustering import REPRODUCIBLE
from distribution import ClusterModel, ScoreSet, normalize_scores, pool_bag_scores, score_dataset
from errors import DimensionMismatchError, MetricsError, ScoreNormalizationError
from mil_dataset import UNKNOWN_LABEL, Dataset

logger = logging.getLogger(__name__)

FROC_OPERATING_POINTS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def _binary(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricsError("labels must be 0 or 1")
    return labels.astype(bool)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = _binary(labels)
    if scores.shape != positive.shape:
        raise DimensionMismatchError(f"{scores.shape[0]} scores for {positive.shape[0]} labels")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> List[Tuple[float, float]]:
    """(false positive rate, true positive rate) at every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = _binary(labels)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC curve needs both classes")
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(positive[order])
    fp = np.cumsum(~positive[order])
    last = np.r_[np.flatnonzero(np.diff(scores[order]) != 0), scores.size - 1]
    return [(0.0, 0.0)] + [(float(fp[i] / n_neg), float(tp[i] / n_pos)) for i in last]


def choose_threshold(bag_scores: Sequence[float], bag_labels: Sequence[int]) -> float:
    """Threshold maximizing Youden's J over midpoints of consecutive distinct scores.

    Predictions are `score > threshold`; ties in J go to the lowest threshold.
    """
    scores = np.asarray(bag_scores, dtype=np.float64)
    positive = _binary(bag_labels)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("threshold selection needs both bag classes")

    distinct = np.unique(scores)
    if distinct.size == 1:
        return float(distinct[0])
    candidates = (distinct[:-1] + distinct[1:]) / 2.0

    pos_sorted = np.sort(scores[positive])
    neg_sorted = np.sort(scores[~positive])
    tp = n_pos - np.searchsorted(pos_sorted, candidates, side="right")
    tn = np.searchsorted(neg_sorted, candidates, side="right")
    # J * n_pos * n_neg in exact integer arithmetic
    j_scaled = tp * n_neg + tn * n_pos - n_pos * n_neg
    return float(candidates[int(np.argmax(j_scaled))])


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float) -> float:
    predicted = np.asarray(scores, dtype=np.float64) > threshold
    return float(np.mean(predicted == _binary(labels)))


def _deduplicated(points: Sequence[Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray]:
    fp_per_bag = np.array([p[0] for p in points])
    sensitivity = np.array([p[1] for p in points])
    # both are non-decreasing; keep the highest sensitivity per FP level
    keep = np.r_[fp_per_bag[1:] != fp_per_bag[:-1], True]
    return fp_per_bag[keep], sensitivity[keep]


def froc(instance_scores: Sequence[float], instance_labels: Sequence[int], bag_of: Sequence[int],
         bag_labels: Sequence[int]) -> Tuple[List[Tuple[float, float]], float]:
    """Sensitivity vs. false positives per bag, swept from the highest score down.

    An instance fires when its score is >= the threshold; one curve point per
    distinct score. FP/bag divides by the number of all bags.
    """
    scores = np.asarray(instance_scores, dtype=np.float64)
    labels = np.asarray(instance_labels)
    if np.any(labels == UNKNOWN_LABEL):
        raise MetricsError("FROC needs known instance labels")
    positive = _binary(labels)
    if len(bag_of) != scores.size:
        raise DimensionMismatchError("bag_of must have one entry per instance")
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise MetricsError("FROC needs at least one positive instance")
    n_bags = len(bag_labels)

    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(positive[order])
    fp = np.cumsum(~positive[order])
    last = np.r_[np.flatnonzero(np.diff(scores[order]) != 0), scores.size - 1]
    points = [(float(fp[i] / n_bags), float(tp[i] / n_pos)) for i in last]

    interpolated = np.interp(FROC_OPERATING_POINTS, *_deduplicated(points))
    return points, float(interpolated.mean())


@dataclass(frozen=True)
class MetricsReport:
    bag_auc: float
    bag_accuracy: float
    threshold: float
    n_bags: int
    n_instances: int
    instance_auc: Optional[float] = None
    froc_points: Optional[List[Tuple[float, float]]] = None
    froc_score: Optional[float] = None
    max_pool_bag_auc: Optional[float] = None
    n_positive_instances: Optional[int] = None
    normalized_threshold: Optional[float] = None
    scores: Optional[ScoreSet] = field(default=None, repr=False, compare=False)

    def froc_sensitivities(self) -> Optional[Dict[str, float]]:
        """Interpolated sensitivity at each standard FP/bag operating point."""
        if self.froc_points is None:
            return None
        fp_per_bag, sensitivity = _deduplicated(self.froc_points)
        values = np.interp(FROC_OPERATING_POINTS, fp_per_bag, sensitivity)
        return {str(point): float(v) for point, v in zip(FROC_OPERATING_POINTS, values)}

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready summary; the full FROC curve is left to the curves CSV."""
        return {
            "instance_auc": self.instance_auc,
            "bag_auc": self.bag_auc,
            "bag_accuracy": self.bag_accuracy,
            "threshold": self.threshold,
            "normalized_threshold": self.normalized_threshold,
            "froc_score": self.froc_score,
            "froc_sensitivities": self.froc_sensitivities(),
            "max_pool_bag_auc": self.max_pool_bag_auc,
            "counts": {
                "n_bags": self.n_bags,
                "n_instances": self.n_instances,
                "n_positive_instances": self.n_positive_instances,
            },
        }


def report_from_scores(dataset: Dataset, bag_scores: np.ndarray, threshold: float,
                       instance_scores: Optional[np.ndarray] = None) -> MetricsReport:
    """Metrics for precomputed scores; instance metrics need instance scores and known labels."""
    instances, bags = dataset
    bag_labels = bags.labels
    report = dict(
        bag_auc=roc_auc(bag_scores, bag_labels),
        bag_accuracy=accuracy(bag_scores, bag_labels, threshold),
        threshold=float(threshold),
        n_bags=len(bags),
        n_instances=instances.n,
    )
    if instance_scores is not None:
        report["max_pool_bag_auc"] = roc_auc(pool_bag_scores(instance_scores, bags, "max"), bag_labels)
        if instances.has_instance_labels:
            labels = instances.instance_label
            points, score = froc(instance_scores, labels, instances.bag_of, bag_labels)
            report.update(
                instance_auc=roc_auc(instance_scores, labels),
                froc_points=points,
                froc_score=score,
                n_positive_instances=int((labels == 1).sum()),
            )
        else:
            logger.warning("instance labels unknown; reporting bag-level metrics only")
    return MetricsReport(**report)


class FittedPipeline(Protocol):
    """What evaluation needs from a trained model (refinement state or loaded bundle)."""

    cluster_model: ClusterModel
    anchors: Tuple[float, float]
    threshold: float

    def transform(self, features: np.ndarray) -> np.ndarray: ...


def evaluate(pipeline: FittedPipeline, test: Dataset, threshold: Optional[float] = None,
             mode: str = REPRODUCIBLE) -> MetricsReport:
    """Map test instances into the final space, score them, and compute every metric.

    The threshold defaults to the one chosen on the training bags.
    """
    instances, bags = test
    if instances.d != pipeline.cluster_model.d:
        raise DimensionMismatchError(
            f"model expects d={pipeline.cluster_model.d}, test data has d={instances.d}")
    mapped = instances.with_features(pipeline.transform(instances.features))
    scores = score_dataset(pipeline.cluster_model, mapped, bags, mode)
    threshold = pipeline.threshold if threshold is None else threshold

    report = report_from_scores(test, scores.bag_scores, threshold, scores.instance_scores)
    try:
        normalized = float(normalize_scores(np.array([threshold]), pipeline.anchors)[0])
    except ScoreNormalizationError:
        normalized = None
    return replace(report, normalized_threshold=normalized, scores=scores)
