"""
Shared builders for the test suite.
"""

from typing import Optional, Sequence

import numpy as np

from mil_dataset import UNKNOWN_LABEL, BagTable, Dataset, InstanceSet
from run_config import RefinementConfig, TrainingConfig
from synthetic import SyntheticConfig


def build_dataset(bag_labels: Sequence[int], bag_size: int, d: int = 2, seed: int = 0,
                  features: Optional[np.ndarray] = None, instance_labels: Optional[np.ndarray] = None,
                  unknown_labels: bool = False) -> Dataset:
    """Contiguous equal-size bags; by default the first instance of each positive bag is positive."""
    n_bags = len(bag_labels)
    bag_of = np.repeat(np.arange(n_bags), bag_size)
    n = bag_of.size
    if features is None:
        features = np.random.default_rng(seed).normal(size=(n, d))
    if instance_labels is None:
        instance_labels = np.zeros(n, dtype=np.int64)
        for b, label in enumerate(bag_labels):
            if label == 1:
                instance_labels[b * bag_size] = 1
    if unknown_labels:
        instance_labels = np.full(n, UNKNOWN_LABEL)
    instances = InstanceSet(features, bag_of, instance_labels)
    bags = BagTable.from_membership(np.arange(100, 100 + n_bags), bag_labels, bag_of)
    return Dataset(instances, bags)


def small_synthetic(**overrides) -> SyntheticConfig:
    values = dict(d=6, g=3, n_neg_bags=8, n_pos_bags=8, bag_size=50, witness_rate=0.2,
                  separation=8.0, seed=3)
    values.update(overrides)
    return SyntheticConfig(**values)


def quick_refinement(**overrides) -> RefinementConfig:
    training = TrainingConfig(epochs=overrides.pop("epochs", 60))
    values = dict(clusters=3, ratio=0.1, max_rounds=3, seed=11, training=training)
    values.update(overrides)
    return RefinementConfig(**values)


def shuffle_within_bags(dataset: Dataset, seed: int = 0) -> Dataset:
    """Same bags, instance order permuted inside every bag."""
    instances, bags = dataset
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(bag.indices) for bag in bags])
    bag_of = instances.bag_of[order]
    shuffled = InstanceSet(instances.features[order], bag_of, instances.instance_label[order])
    return Dataset(shuffled, BagTable.from_membership(bags.bag_ids, bags.labels, bag_of))


def duplicate_bags(dataset: Dataset) -> Dataset:
    """Every bag (and its instances) appears twice."""
    instances, bags = dataset
    n_bags = len(bags)
    bag_of = np.concatenate([instances.bag_of, instances.bag_of + n_bags])
    doubled = InstanceSet(np.vstack([instances.features, instances.features]), bag_of,
                          np.concatenate([instances.instance_label, instances.instance_label]))
    bag_ids = np.concatenate([bags.bag_ids, bags.bag_ids + bags.bag_ids.max() + 1])
    return Dataset(doubled, BagTable.from_membership(bag_ids, np.concatenate([bags.labels, bags.labels]), bag_of))
