"""
Bag/instance domain types and dataset validation.

A dataset is a flat feature matrix (one row per instance) plus a bag table
mapping each bag to its label and member instance indices. Instance labels
are ternary: 0, 1, or UNKNOWN_LABEL when ground truth is not available.
"""

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import DatasetValidationError, DimensionMismatchError

UNKNOWN_LABEL = -1


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class InstanceSet:
    """Feature matrix with per-instance bag index and ternary label."""

    features: np.ndarray
    bag_of: np.ndarray
    instance_label: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DatasetValidationError(f"features must be a 2-D matrix, got shape {features.shape}")
        n, d = features.shape
        if n < 1 or d < 1:
            raise DatasetValidationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")

        bag_of = np.asarray(self.bag_of, dtype=np.int64)
        labels = np.asarray(self.instance_label, dtype=np.int64)
        if bag_of.shape != (n,) or labels.shape != (n,):
            raise DatasetValidationError(
                f"bag_of {bag_of.shape} and instance_label {labels.shape} must both have length {n}"
            )

        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "bag_of", _frozen(bag_of))
        object.__setattr__(self, "instance_label", _frozen(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_instance_labels(self) -> bool:
        """True when every instance carries a known 0/1 label."""
        return bool(np.all(self.instance_label != UNKNOWN_LABEL))

    def with_features(self, features: np.ndarray) -> "InstanceSet":
        """Same bags and labels, new (e.g. remapped) feature matrix."""
        features = np.asarray(features)
        if features.shape[0] != self.n:
            raise DimensionMismatchError(f"expected {self.n} rows, got {features.shape[0]}")
        return InstanceSet(features, self.bag_of, self.instance_label)


@dataclass(frozen=True)
class Bag:
    bag_id: int
    label: int
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(np.asarray(self.indices, dtype=np.int64)))

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class BagTable:
    """Ordered bags; a bag's position in `bags` is its bag index."""

    bags: Tuple[Bag, ...]

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[Bag]:
        return iter(self.bags)

    def __getitem__(self, index: int) -> Bag:
        return self.bags[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([bag.label for bag in self.bags], dtype=np.int64)

    @property
    def bag_ids(self) -> np.ndarray:
        return np.array([bag.bag_id for bag in self.bags], dtype=np.int64)

    def instances_with_bag_label(self, label: int) -> np.ndarray:
        """Sorted indices of all instances whose bag has the given label."""
        parts = [bag.indices for bag in self.bags if bag.label == label]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    @classmethod
    def from_membership(cls, bag_ids: Sequence[int], bag_labels: Sequence[int],
                        bag_of: np.ndarray) -> "BagTable":
        """Build index lists from a per-instance bag-index vector."""
        bag_of = np.asarray(bag_of, dtype=np.int64)
        order = np.argsort(bag_of, kind="stable")
        boundaries = np.searchsorted(bag_of[order], np.arange(len(bag_ids) + 1))
        bags = [
            Bag(int(bag_id), int(label), order[boundaries[i]:boundaries[i + 1]])
            for i, (bag_id, label) in enumerate(zip(bag_ids, bag_labels))
        ]
        return cls(tuple(bags))


@dataclass(frozen=True)
class Dataset:
    instances: InstanceSet
    bags: BagTable

    def __iter__(self):
        # allows `instances, bags = dataset`
        return iter((self.instances, self.bags))


@dataclass(frozen=True)
class DatasetSplit:
    train: Dataset
    test: Dataset

    def __post_init__(self):
        if self.train.instances.d != self.test.instances.d:
            raise DimensionMismatchError(
                f"train d={self.train.instances.d} differs from test d={self.test.instances.d}"
            )


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_dataset."""

    kind: str
    message: str
    bag_index: Optional[int] = None
    instance_index: Optional[int] = None


def validate_dataset(instances: InstanceSet, bags: BagTable) -> List[Violation]:
    """Return every invariant violation; an empty list means the data is valid."""
    violations: List[Violation] = []
    n = instances.n
    n_bags = len(bags)

    # Bag-level checks
    seen_ids: Dict[int, int] = {}
    cover_count = np.zeros(n, dtype=np.int64)
    covering_bag = np.full(n, -1, dtype=np.int64)
    for b, bag in enumerate(bags):
        if bag.label not in (0, 1):
            violations.append(Violation("bad_bag_label", f"bag {bag.bag_id} has label {bag.label}", b))
        if bag.bag_id in seen_ids:
            violations.append(Violation(
                "duplicate_bag_id", f"bag_id {bag.bag_id} also used by bag index {seen_ids[bag.bag_id]}", b))
        else:
            seen_ids[bag.bag_id] = b
        if bag.size == 0:
            violations.append(Violation("empty_bag", f"bag {bag.bag_id} has no instances", b))
            continue
        out_of_range = (bag.indices < 0) | (bag.indices >= n)
        for idx in bag.indices[out_of_range]:
            violations.append(Violation(
                "bad_instance_index", f"bag {bag.bag_id} lists instance {int(idx)} outside [0, {n})", b))
        valid = bag.indices[~out_of_range]
        np.add.at(cover_count, valid, 1)
        covering_bag[valid] = b

    # Instance-level checks
    for i in np.flatnonzero(cover_count == 0):
        violations.append(Violation("uncovered_instance", f"instance {i} belongs to no bag", None, int(i)))
    for i in np.flatnonzero(cover_count > 1):
        violations.append(Violation(
            "overlapping_instance", f"instance {i} is listed by {cover_count[i]} bags", None, int(i)))

    orphan = (instances.bag_of < 0) | (instances.bag_of >= n_bags)
    for i in np.flatnonzero(orphan):
        violations.append(Violation(
            "orphan_instance", f"instance {i} refers to missing bag index {instances.bag_of[i]}", None, int(i)))
    mismatch = (cover_count == 1) & ~orphan & (instances.bag_of != covering_bag)
    for i in np.flatnonzero(mismatch):
        violations.append(Violation(
            "membership_mismatch",
            f"instance {i} has bag_of={instances.bag_of[i]} but is listed by bag index {covering_bag[i]}",
            int(covering_bag[i]), int(i)))

    bad_labels = ~np.isin(instances.instance_label, (0, 1, UNKNOWN_LABEL))
    for i in np.flatnonzero(bad_labels):
        violations.append(Violation(
            "bad_instance_label", f"instance {i} has label {instances.instance_label[i]}", None, int(i)))

    non_finite = ~np.all(np.isfinite(instances.features), axis=1)
    for i in np.flatnonzero(non_finite):
        violations.append(Violation("non_finite_feature", f"instance {i} has a NaN or infinite feature",
                                    None, int(i)))

    # bag label consistency, only where instance labels are known
    for b, bag in enumerate(bags):
        members = bag.indices[(bag.indices >= 0) & (bag.indices < n)]
        if members.size == 0 or bag.label not in (0, 1):
            continue
        member_labels = instances.instance_label[members]
        if bag.label == 0 and np.any(member_labels == 1):
            first = int(members[np.argmax(member_labels == 1)])
            violations.append(Violation(
                "negative_bag_with_positive_instance",
                f"negative bag {bag.bag_id} contains positive instance {first}", b, first))
        if bag.label == 1 and np.all(member_labels == 0):
            violations.append(Violation(
                "positive_bag_without_positive_instance",
                f"positive bag {bag.bag_id} has only negative instance labels", b))

    return violations


def require_valid(instances: InstanceSet, bags: BagTable, context: str = "dataset") -> None:
    """Raise DatasetValidationError carrying all violations, if any."""
    violations = validate_dataset(instances, bags)
    if violations:
        head = "; ".join(v.message for v in violations[:3])
        more = f" (+{len(violations) - 3} more)" if len(violations) > 3 else ""
        raise DatasetValidationError(f"{context} is invalid: {head}{more}", violations)
