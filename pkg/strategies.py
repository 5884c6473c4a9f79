"""
Pipeline strategies compared by the ablation runner.

Each strategy trains on a training split and reports metrics on a test split.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from distribution import pool_bag_scores
from errors import ConfigError
from metrics import MetricsReport, choose_threshold, evaluate, report_from_scores
from mil_dataset import BagTable, Dataset, InstanceSet
from refinement import fit_heads, head_logits, refine, select_extremes
from run_config import RefinementConfig, derive_seed

logger = logging.getLogger(__name__)

# derive_seed purposes for the non-refinement trainers
_INSTANCE_CLASSIFIER_STREAM = 10
_BAG_CLASSIFIER_STREAM = 11

Runner = Callable[[Dataset, Dataset, RefinementConfig], MetricsReport]


@dataclass(frozen=True)
class Strategy:
    """A named way of turning a training split into test metrics."""
    name: str
    description: str
    runner: Runner
    requires_instance_labels: bool = False


def _refine_runner(max_rounds=None) -> Runner:
    def run(train: Dataset, test: Dataset, config: RefinementConfig) -> MetricsReport:
        if max_rounds is not None:
            config = config.model_copy(update={"max_rounds": max_rounds})
        state = refine(train.instances, train.bags, config)
        return evaluate(state, test, mode=config.mode)
    return run


def _logit_report(params, train: Dataset, test: Dataset) -> MetricsReport:
    train_scores = head_logits(params, train.instances.features)
    threshold = choose_threshold(pool_bag_scores(train_scores, train.bags), train.bags.labels)
    test_scores = head_logits(params, test.instances.features)
    return report_from_scores(test, pool_bag_scores(test_scores, test.bags), threshold, test_scores)


def key_instance_baseline(train: Dataset, test: Dataset, config: RefinementConfig) -> MetricsReport:
    """Instance classifier on bag labels, then retrained on its own extreme instances."""
    instances, bags = train
    features = instances.features
    labels = bags.labels[instances.bag_of].astype(np.float64)
    params, _ = fit_heads(features, labels, config.training, derive_seed(config.seed, 0, _INSTANCE_CLASSIFIER_STREAM))

    previous = None
    for r in range(1, config.max_rounds + 1):
        selection = select_extremes(head_logits(params, features), bags, config.ratio)
        if selection.same_as(previous):
            break
        seed = derive_seed(config.seed, r, _INSTANCE_CLASSIFIER_STREAM)
        params, _ = fit_heads(*selection.training_set(features), config.training, seed)
        previous = selection
    return _logit_report(params, train, test)


def fully_supervised(train: Dataset, test: Dataset, config: RefinementConfig) -> MetricsReport:
    """Upper bound: heads trained on every instance with its true label."""
    instances = train.instances
    if not instances.has_instance_labels:
        raise ConfigError("the fully-supervised strategy needs known instance labels in the training file")
    params, _ = fit_heads(instances.features, instances.instance_label.astype(np.float64), config.training,
                          derive_seed(config.seed, 0, _INSTANCE_CLASSIFIER_STREAM))
    return _logit_report(params, train, test)


def pool_bag_features(instances: InstanceSet, bags: BagTable, method: str = "mean") -> np.ndarray:
    """One feature row per bag: the mean or element-wise max of its instances."""
    if method not in ("mean", "max"):
        raise ConfigError(f"unknown pooling method {method!r}; use mean or max")
    reduce = np.mean if method == "mean" else np.max
    return np.stack([reduce(instances.features[bag.indices], axis=0) for bag in bags])


def pooling_baseline(train: Dataset, test: Dataset, method: str, config: RefinementConfig) -> MetricsReport:
    """Bag classifier on pooled bag features; bag-level metrics only."""
    train_features = pool_bag_features(train.instances, train.bags, method)
    params, _ = fit_heads(train_features, train.bags.labels.astype(np.float64), config.training,
                          derive_seed(config.seed, 0, _BAG_CLASSIFIER_STREAM))
    threshold = choose_threshold(head_logits(params, train_features), train.bags.labels)
    test_scores = head_logits(params, pool_bag_features(test.instances, test.bags, method))
    return report_from_scores(test, test_scores, threshold)


STRATEGIES: List[Strategy] = [
    Strategy(
        name="baseline1",
        description="key-instance classifier without distribution modeling",
        runner=key_instance_baseline,
    ),
    Strategy(
        name="baseline2",
        description="cluster-conditioned scoring of the initial space, no refinement",
        runner=_refine_runner(max_rounds=0),
    ),
    Strategy(
        name="one-shot",
        description="a single feature-space refinement round",
        runner=_refine_runner(max_rounds=1),
    ),
    Strategy(
        name="dgmil",
        description="refinement iterated until the extreme selection repeats",
        runner=_refine_runner(),
    ),
    Strategy(
        name="fully-supervised",
        description="heads trained on ground-truth instance labels",
        runner=fully_supervised,
        requires_instance_labels=True,
    ),
    Strategy(
        name="mean-pooling",
        description="bag classifier on mean-pooled bag features",
        runner=lambda train, test, config: pooling_baseline(train, test, "mean", config),
    ),
    Strategy(
        name="max-pooling",
        description="bag classifier on max-pooled bag features",
        runner=lambda train, test, config: pooling_baseline(train, test, "max", config),
    ),
]


def get_strategy(name: str) -> Strategy:
    """Get a strategy by name."""
    for strategy in STRATEGIES:
        if strategy.name == name:
            return strategy
    raise ConfigError(f"unknown strategy {name!r}; choose from {', '.join(s.name for s in STRATEGIES)}")


def run_strategy(strategy: Strategy, train: Dataset, test: Dataset, config: RefinementConfig) -> MetricsReport:
    logger.debug("running strategy %s", strategy.name)
    return strategy.runner(train, test, config)
