import numpy as np
import pytest
from fixtures import build_dataset

from errors import DatasetValidationError, DimensionMismatchError
from mil_dataset import (UNKNOWN_LABEL, Bag, BagTable, Dataset, DatasetSplit, InstanceSet, require_valid,
                         validate_dataset)


def _single_bag(bag_label, instance_labels):
    n = len(instance_labels)
    instances = InstanceSet(np.zeros((n, 2)), np.zeros(n), instance_labels)
    return instances, BagTable((Bag(7, bag_label, np.arange(n)),))


def test_negative_bag_of_negatives_is_valid():
    assert validate_dataset(*_single_bag(0, [0, 0, 0])) == []


def test_negative_bag_with_positive_instance_names_the_bag():
    violations = validate_dataset(*_single_bag(0, [0, 1, 0]))
    assert len(violations) == 1
    assert violations[0].kind == "negative_bag_with_positive_instance"
    assert violations[0].bag_index == 0
    assert violations[0].instance_index == 1


def test_positive_bag_with_unknown_labels_is_valid():
    unknown = [UNKNOWN_LABEL] * 3
    assert validate_dataset(*_single_bag(1, unknown)) == []


def test_positive_bag_with_only_negative_labels_is_rejected():
    violations = validate_dataset(*_single_bag(1, [0, 0]))
    assert [v.kind for v in violations] == ["positive_bag_without_positive_instance"]


@pytest.fixture
def valid():
    dataset = build_dataset([0, 1, 0, 1], bag_size=5, d=3)
    assert validate_dataset(*dataset) == []
    return dataset


def _replace_bag(bags, index, **changes):
    bag = bags[index]
    fields = dict(bag_id=bag.bag_id, label=bag.label, indices=bag.indices)
    fields.update(changes)
    items = list(bags)
    items[index] = Bag(**fields)
    return BagTable(tuple(items))


def test_flipping_positive_bag_label_is_one_violation(valid):
    violations = validate_dataset(valid.instances, _replace_bag(valid.bags, 1, label=0))
    assert [v.kind for v in violations] == ["negative_bag_with_positive_instance"]
    assert violations[0].bag_index == 1


def test_flipping_negative_bag_label_is_one_violation(valid):
    violations = validate_dataset(valid.instances, _replace_bag(valid.bags, 0, label=1))
    assert [v.kind for v in violations] == ["positive_bag_without_positive_instance"]


def test_bag_label_outside_zero_one(valid):
    violations = validate_dataset(valid.instances, _replace_bag(valid.bags, 2, label=2))
    assert [v.kind for v in violations] == ["bad_bag_label"]


def test_orphaned_instance_is_one_violation(valid):
    instances = valid.instances
    bag_of = instances.bag_of.copy()
    bag_of[3] = len(valid.bags)
    orphaned = InstanceSet(instances.features, bag_of, instances.instance_label)
    violations = validate_dataset(orphaned, valid.bags)
    assert [v.kind for v in violations] == ["orphan_instance"]
    assert violations[0].instance_index == 3


def test_non_finite_feature_is_one_violation(valid):
    features = valid.instances.features.copy()
    features[6, 1] = np.nan
    broken = InstanceSet(features, valid.instances.bag_of, valid.instances.instance_label)
    violations = validate_dataset(broken, valid.bags)
    assert [v.kind for v in violations] == ["non_finite_feature"]
    assert violations[0].instance_index == 6


def test_duplicate_bag_id(valid):
    violations = validate_dataset(valid.instances, _replace_bag(valid.bags, 2, bag_id=valid.bags[0].bag_id))
    assert [v.kind for v in violations] == ["duplicate_bag_id"]


def test_overlapping_and_uncovered_instances(valid):
    indices = valid.bags[0].indices.copy()
    indices[0] = valid.bags[2].indices[0]
    kinds = {v.kind for v in validate_dataset(valid.instances, _replace_bag(valid.bags, 0, indices=indices))}
    assert {"overlapping_instance", "uncovered_instance"} <= kinds


def test_empty_bag(valid):
    violations = validate_dataset(valid.instances, _replace_bag(valid.bags, 0, indices=[]))
    assert "empty_bag" in {v.kind for v in violations}


def test_require_valid_carries_all_violations(valid):
    bags = _replace_bag(_replace_bag(valid.bags, 0, label=1), 1, label=0)
    with pytest.raises(DatasetValidationError) as info:
        require_valid(valid.instances, bags)
    assert len(info.value.violations) == 2


def test_instance_arrays_are_read_only(valid):
    with pytest.raises(ValueError):
        valid.instances.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        valid.bags[0].indices[0] = 3


def test_instance_set_rejects_mismatched_lengths():
    with pytest.raises(DatasetValidationError):
        InstanceSet(np.zeros((4, 2)), np.zeros(3), np.zeros(4))


def test_from_membership_groups_indices():
    bags = BagTable.from_membership([10, 20], [0, 1], np.array([1, 0, 1, 0]))
    assert bags[0].indices.tolist() == [1, 3]
    assert bags[1].indices.tolist() == [0, 2]
    assert bags.instances_with_bag_label(1).tolist() == [0, 2]


def test_split_dimension_mismatch():
    train = build_dataset([0, 1], bag_size=3, d=2)
    test = build_dataset([0, 1], bag_size=3, d=3)
    with pytest.raises(DimensionMismatchError):
        DatasetSplit(train, test)


def test_dataset_unpacks(valid):
    instances, bags = valid
    assert isinstance(valid, Dataset)
    assert instances.n == 20 and len(bags) == 4


def test_out_of_range_instance_label_is_kept_and_flagged():
    instances, bags = _single_bag(1, [255, 1])
    assert instances.instance_label.tolist() == [255, 1]
    violations = validate_dataset(instances, bags)
    assert [v.kind for v in violations] == ["bad_instance_label"]
    assert violations[0].instance_index == 0
