"""
Iterative feature-space refinement.

Each round scores the current space with a cluster model of the negative
bags, pseudo-labels the extreme instances (highest-scoring from positive
bags as 1, lowest-scoring from negative bags as 0), trains a linear
projection head plus a linear classification head on them, and remaps every
instance through the projection head. The loop stops when the extreme
selection repeats or after `max_rounds` projections.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from clustering import kmeans
from distribution import ClusterModel, ScoreSet, fit_cluster_model, score_dataset
from errors import (DatasetValidationError, DGMILError, DimensionMismatchError, RefinementError,
                    TrainingDivergenceError)
from metrics import choose_threshold, roc_auc
from mil_dataset import BagTable, InstanceSet
from run_config import RefinementConfig, TrainingConfig, derive_seed

logger = logging.getLogger(__name__)

# sub-stream purposes under derive_seed(config.seed, round, purpose)
KMEANS_STREAM = 0
HEADS_STREAM = 1

# features whose spread is below this are left unscaled by standardization
MIN_SCALE = 1e-12


@dataclass(frozen=True)
class ExtremeSelection:
    """Pseudo-labeled instance indices, each sorted ascending."""

    pos_indices: np.ndarray
    neg_indices: np.ndarray
    ratio: float

    def same_as(self, other: Optional["ExtremeSelection"]) -> bool:
        return (other is not None
                and np.array_equal(self.pos_indices, other.pos_indices)
                and np.array_equal(self.neg_indices, other.neg_indices))

    def training_set(self, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        rows = np.concatenate([self.pos_indices, self.neg_indices])
        labels = np.concatenate([np.ones(self.pos_indices.size), np.zeros(self.neg_indices.size)])
        return features[rows], labels

    def precision(self, instance_label: np.ndarray) -> Tuple[float, float]:
        """Fraction of pseudo labels that agree with ground truth, per side."""
        return (float(np.mean(instance_label[self.pos_indices] == 1)),
                float(np.mean(instance_label[self.neg_indices] == 0)))


def _extreme_count(q: float, pool_size: int) -> int:
    # 1e-9 keeps e.g. 0.1 * 30 from flooring to 2
    return max(1, math.floor(q * pool_size + 1e-9))


def select_extremes(scores: Union[ScoreSet, np.ndarray], bags: BagTable, q: float) -> ExtremeSelection:
    """Global top-q of positive-bag instances and bottom-q of negative-bag instances.

    Score ties are broken by ascending instance index on both sides.
    """
    values = scores.instance_scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    if not 0 < q <= 0.5:
        raise ValueError(f"extreme ratio must lie in (0, 0.5], got {q}")
    pos_pool = bags.instances_with_bag_label(1)
    neg_pool = bags.instances_with_bag_label(0)
    if pos_pool.size == 0 or neg_pool.size == 0:
        raise DatasetValidationError("extreme selection needs at least one positive and one negative bag")

    # lexsort: last key is primary
    top = pos_pool[np.lexsort((pos_pool, -values[pos_pool]))][:_extreme_count(q, pos_pool.size)]
    bottom = neg_pool[np.lexsort((neg_pool, values[neg_pool]))][:_extreme_count(q, neg_pool.size)]
    return ExtremeSelection(np.sort(top), np.sort(bottom), q)


@dataclass(frozen=True)
class HeadParams:
    """Linear projection head (W, b) followed by a linear classification head (w, c)."""

    projection_weight: np.ndarray
    projection_bias: np.ndarray
    classifier_weight: np.ndarray
    classifier_bias: float

    def __post_init__(self):
        W = np.asarray(self.projection_weight, dtype=np.float64)
        d = W.shape[0] if W.ndim == 2 else -1
        shapes_ok = (W.shape == (d, d)
                     and np.shape(self.projection_bias) == (d,)
                     and np.shape(self.classifier_weight) == (d,))
        if not shapes_ok:
            raise DimensionMismatchError(
                f"head shapes W{W.shape} b{np.shape(self.projection_bias)} "
                f"w{np.shape(self.classifier_weight)} are not d x d, d, d")
        object.__setattr__(self, "projection_weight", W)
        object.__setattr__(self, "projection_bias", np.asarray(self.projection_bias, dtype=np.float64))
        object.__setattr__(self, "classifier_weight", np.asarray(self.classifier_weight, dtype=np.float64))
        object.__setattr__(self, "classifier_bias", float(self.classifier_bias))

    @property
    def d(self) -> int:
        return self.projection_weight.shape[0]

    @classmethod
    def identity(cls, d: int) -> "HeadParams":
        return cls(np.eye(d), np.zeros(d), np.zeros(d), 0.0)

    def arrays(self) -> List[np.ndarray]:
        return [self.projection_weight, self.projection_bias, self.classifier_weight,
                np.array(self.classifier_bias)]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "HeadParams":
        W, b, w, c = arrays
        return cls(W, b, w, float(c))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def head_logits(params: HeadParams, features: np.ndarray) -> np.ndarray:
    hidden = features @ params.projection_weight.T + params.projection_bias
    return hidden @ params.classifier_weight + params.classifier_bias


def head_loss_and_gradients(params: HeadParams, features: np.ndarray,
                            labels: np.ndarray) -> Tuple[float, HeadParams]:
    """Mean binary cross-entropy of sigmoid(logits) and its gradient for every parameter."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    hidden = features @ params.projection_weight.T + params.projection_bias
    logits = hidden @ params.classifier_weight + params.classifier_bias
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))

    g = (expit(logits) - labels) / labels.size
    w = params.classifier_weight
    grads = HeadParams(
        projection_weight=np.outer(w, features.T @ g),
        projection_bias=w * g.sum(),
        classifier_weight=hidden.T @ g,
        classifier_bias=float(g.sum()),
    )
    return loss, grads


class Adam:
    """Adam with bias correction over a list of parameter arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float) -> List[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bias1 = 1 - self.beta1 ** self.t
        bias2 = 1 - self.beta2 ** self.t
        updated = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            updated.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updated


def cosine_lr(lr: float, epoch: int, epochs: int) -> float:
    return 0.5 * lr * (1.0 + math.cos(math.pi * epoch / epochs))


def fit_heads(features: np.ndarray, labels: np.ndarray, config: TrainingConfig,
              seed: int) -> Tuple[HeadParams, Tuple[float, ...]]:
    """Train projection + classification heads on (features, labels).

    Training runs on per-feature standardized inputs with the projection
    initialized to identity; the standardization is folded into the returned
    projection so it applies to raw features.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, d = features.shape
    center = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < MIN_SCALE] = 1.0
    standardized = (features - center) / scale

    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    arrays = [np.eye(d), np.zeros(d), rng.uniform(-bound, bound, d), np.array(0.0)]
    optimizer = Adam(config.beta1, config.beta2, config.adam_eps)

    losses: List[float] = []
    stalled = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        if config.batch_size is None or config.batch_size >= n:
            batches = [slice(None)]
        else:
            order = rng.permutation(n)
            batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]

        weighted = 0.0
        for batch in batches:
            batch_labels = labels[batch]
            loss, grads = head_loss_and_gradients(HeadParams.from_arrays(arrays), standardized[batch], batch_labels)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss)
            weighted += loss * batch_labels.size
            arrays = optimizer.step(arrays, grads.arrays(), lr)
        epoch_loss = weighted / n
        if not HeadParams.from_arrays(arrays).is_finite():
            raise TrainingDivergenceError(epoch, float("nan"))

        if losses and losses[-1] - epoch_loss < config.min_delta:
            stalled += 1
        else:
            stalled = 0
        losses.append(epoch_loss)
        if stalled >= config.patience:
            logger.debug("head training stopped early at epoch %d (loss %.6f)", epoch, epoch_loss)
            break

    W, b, w, c = arrays
    W_raw = W / scale[None, :]
    return HeadParams(W_raw, b - W_raw @ center, w, float(c)), tuple(losses)


def train_heads(features: np.ndarray, selection: ExtremeSelection, config: TrainingConfig,
                seed: int) -> Tuple[HeadParams, Tuple[float, ...]]:
    """fit_heads on the pseudo-labeled extreme instances."""
    if selection.pos_indices.size == 0 or selection.neg_indices.size == 0:
        raise DatasetValidationError("head training needs pseudo labels of both classes")
    return fit_heads(*selection.training_set(features), config, seed)


def remap_features(features: np.ndarray, heads: HeadParams) -> np.ndarray:
    """Apply the projection head only: X W^T + b."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != heads.d:
        raise DimensionMismatchError(f"projection expects d={heads.d}, features have shape {features.shape}")
    return features @ heads.projection_weight.T + heads.projection_bias


def compose_heads(outer: HeadParams, inner: HeadParams) -> HeadParams:
    """Single head equal to applying `inner` then `outer`; keeps the outer classifier."""
    if outer.d != inner.d:
        raise DimensionMismatchError(f"cannot compose heads of dimension {outer.d} and {inner.d}")
    return HeadParams(
        outer.projection_weight @ inner.projection_weight,
        outer.projection_weight @ inner.projection_bias + outer.projection_bias,
        outer.classifier_weight,
        outer.classifier_bias,
    )


def collapse(heads: Sequence[HeadParams], d: int) -> HeadParams:
    """Compose per-round heads, first round innermost; identity when empty."""
    collapsed = HeadParams.identity(d)
    for round_heads in heads:
        collapsed = compose_heads(round_heads, collapsed)
    return collapsed


@dataclass(frozen=True)
class ScoringPass:
    """One K-means + cluster-model + scoring pass over the current space."""

    cluster_model: ClusterModel
    scores: ScoreSet
    selection: ExtremeSelection
    kmeans_seed: int
    inertia: float


@dataclass(frozen=True)
class RoundRecord:
    """Audit trail of one projection round.

    The AUCs are measured in the space produced by this round's projection.
    """

    round_index: int
    selection: ExtremeSelection
    heads: HeadParams
    loss_curve: Tuple[float, ...]
    kmeans_seed: int
    kmeans_inertia: float
    head_seed: int
    pos_precision: Optional[float]
    neg_precision: Optional[float]
    instance_auc: Optional[float] = None
    bag_auc: Optional[float] = None

    def to_log_record(self) -> Dict:
        return {
            "round": self.round_index,
            "n_pseudo_positive": int(self.selection.pos_indices.size),
            "n_pseudo_negative": int(self.selection.neg_indices.size),
            "pseudo_positive_precision": self.pos_precision,
            "pseudo_negative_precision": self.neg_precision,
            "epochs": len(self.loss_curve),
            "final_loss": self.loss_curve[-1],
            "kmeans_seed": self.kmeans_seed,
            "kmeans_inertia": self.kmeans_inertia,
            "head_seed": self.head_seed,
            "train_instance_auc": self.instance_auc,
            "train_bag_auc": self.bag_auc,
        }


@dataclass(frozen=True)
class RefinementState:
    config: RefinementConfig
    initial: ScoringPass
    final: ScoringPass
    rounds: Tuple[RoundRecord, ...]
    features: np.ndarray
    converged: bool
    threshold: float
    final_instance_auc: Optional[float]
    final_bag_auc: float
    heads: Tuple[HeadParams, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(record.heads for record in self.rounds))

    @property
    def round_index(self) -> int:
        return len(self.rounds)

    @property
    def initial_scores(self) -> ScoreSet:
        return self.initial.scores

    @property
    def cluster_model(self) -> ClusterModel:
        return self.final.cluster_model

    @property
    def anchors(self) -> Tuple[float, float]:
        return self.final.scores.anchors

    @property
    def stop_reason(self) -> str:
        return "converged" if self.converged else "max_rounds"

    def transform(self, features: np.ndarray) -> np.ndarray:
        for heads in self.heads:
            features = remap_features(features, heads)
        return np.asarray(features, dtype=np.float64)

    def collapsed(self) -> HeadParams:
        return collapse(self.heads, self.features.shape[1])


def apply_to_test(state, test_instances: InstanceSet) -> np.ndarray:
    """Map test features through every round's projection, in round order."""
    d = state.cluster_model.d
    if test_instances.d != d:
        raise DimensionMismatchError(f"model expects d={d}, test instances have d={test_instances.d}")
    return state.transform(test_instances.features)


def _aucs(instances: InstanceSet, bags: BagTable, scores: ScoreSet) -> Tuple[Optional[float], float]:
    instance_auc = None
    if instances.has_instance_labels and 0 < instances.instance_label.sum() < instances.n:
        instance_auc = roc_auc(scores.instance_scores, instances.instance_label)
    return instance_auc, roc_auc(scores.bag_scores, bags.labels)


def scoring_pass(features: np.ndarray, instances: InstanceSet, bags: BagTable, config: RefinementConfig,
                 round_index: int) -> ScoringPass:
    """Fresh k-means++ on negative-bag instances, then fit, score and select."""
    seed = derive_seed(config.seed, round_index, KMEANS_STREAM)
    negatives = bags.instances_with_bag_label(0)
    clusters = kmeans(features[negatives], config.clusters, seed=seed, mode=config.mode)
    model = fit_cluster_model(features[negatives], clusters.assignment, config.clusters)
    scores = score_dataset(model, instances.with_features(features), bags, config.mode)
    selection = select_extremes(scores, bags, config.ratio)
    return ScoringPass(model, scores, selection, seed, clusters.inertia)


def refine(instances: InstanceSet, bags: BagTable, config: RefinementConfig,
           on_round: Optional[Callable[[RoundRecord], None]] = None) -> RefinementState:
    """Run scoring / pseudo-labeling / projection rounds until the selection repeats.

    `max_rounds=0` only scores the initial space; `max_rounds=1` applies one projection.
    """
    labels = bags.labels
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise DatasetValidationError("refinement needs at least one positive and one negative bag")
    known = instances.has_instance_labels

    features = np.asarray(instances.features, dtype=np.float64)
    rounds: List[RoundRecord] = []
    previous: Optional[ExtremeSelection] = None
    initial: Optional[ScoringPass] = None
    converged = False

    for r in range(config.max_rounds + 1):
        try:
            current = scoring_pass(features, instances, bags, config, r)
        except DGMILError as exc:
            raise RefinementError(r, str(exc)) from exc

        if initial is None:
            initial = current
        if rounds:
            instance_auc, bag_auc = _aucs(instances, bags, current.scores)
            rounds[-1] = replace(rounds[-1], instance_auc=instance_auc, bag_auc=bag_auc)
            if on_round:
                on_round(rounds[-1])
            logger.info("round %d: %d+%d pseudo labels, loss %.4f, bag AUC %.4f", r,
                        rounds[-1].selection.pos_indices.size, rounds[-1].selection.neg_indices.size,
                        rounds[-1].loss_curve[-1], bag_auc)

        if current.selection.same_as(previous):
            converged = True
            break
        if r == config.max_rounds:
            break

        head_seed = derive_seed(config.seed, r + 1, HEADS_STREAM)
        try:
            heads, curve = train_heads(features, current.selection, config.training, head_seed)
            features = remap_features(features, heads)
        except DGMILError as exc:
            raise RefinementError(r + 1, str(exc)) from exc

        precision = current.selection.precision(instances.instance_label) if known else (None, None)
        rounds.append(RoundRecord(r + 1, current.selection, heads, curve, current.kmeans_seed, current.inertia,
                                  head_seed, *precision))
        previous = current.selection

    final_instance_auc, final_bag_auc = _aucs(instances, bags, current.scores)
    threshold = choose_threshold(current.scores.bag_scores, labels)
    features.setflags(write=False)
    return RefinementState(config, initial, current, tuple(rounds), features, converged,
                           threshold, final_instance_auc, final_bag_auc)
