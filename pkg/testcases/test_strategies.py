import numpy as np
import pytest
from fixtures import build_dataset, quick_refinement, small_synthetic

from errors import ConfigError
from strategies import STRATEGIES, get_strategy, pool_bag_features, run_strategy
from synthetic import generate


@pytest.fixture(scope="module")
def split():
    return generate(small_synthetic(seed=31))


def test_strategy_names_are_unique():
    names = [s.name for s in STRATEGIES]
    assert len(names) == len(set(names))
    assert {"baseline1", "baseline2", "one-shot", "dgmil"} <= set(names)


def test_unknown_strategy():
    with pytest.raises(ConfigError, match="unknown strategy"):
        get_strategy("magic")


@pytest.mark.parametrize("name", ["baseline2", "one-shot", "dgmil", "baseline1", "fully-supervised"])
def test_instance_level_strategies_report_instance_metrics(split, name):
    report = run_strategy(get_strategy(name), split.train, split.test, quick_refinement(max_rounds=2))
    assert 0.0 <= report.instance_auc <= 1.0
    assert 0.0 <= report.bag_auc <= 1.0
    assert report.froc_score is not None


@pytest.mark.parametrize("name", ["mean-pooling", "max-pooling"])
def test_pooling_strategies_are_bag_level_only(split, name):
    report = run_strategy(get_strategy(name), split.train, split.test, quick_refinement())
    assert report.instance_auc is None
    assert report.n_bags == len(split.test.bags)


def test_baseline2_is_the_unrefined_pipeline(split):
    config = quick_refinement(max_rounds=5)
    a = run_strategy(get_strategy("baseline2"), split.train, split.test, config)
    b = run_strategy(get_strategy("dgmil"), split.train, split.test, config.model_copy(update={"max_rounds": 0}))
    assert a.instance_auc == b.instance_auc


def test_fully_supervised_needs_instance_labels():
    train = build_dataset([0, 1, 0, 1], bag_size=5, unknown_labels=True)
    with pytest.raises(ConfigError):
        run_strategy(get_strategy("fully-supervised"), train, train, quick_refinement())


def test_pool_bag_features():
    dataset = build_dataset([0, 1], bag_size=2, features=np.array([[1.0, 4.0], [3.0, 0.0], [5.0, 5.0], [7.0, 1.0]]))
    assert pool_bag_features(*dataset, "mean").tolist() == [[2.0, 2.0], [6.0, 3.0]]
    assert pool_bag_features(*dataset, "max").tolist() == [[3.0, 4.0], [7.0, 5.0]]
    with pytest.raises(ConfigError):
        pool_bag_features(*dataset, "median")
