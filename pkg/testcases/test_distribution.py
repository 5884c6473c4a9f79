import numpy as np
import pytest
from fixtures import build_dataset, shuffle_within_bags, small_synthetic

from clustering import kmeans
from distribution import (ClusterModel, cluster_distances, fit_cluster_model, normalize_scores, pool_bag_scores,
                          positive_score, score_dataset)
from errors import ClusteringError, DimensionMismatchError, ScoreNormalizationError
from metrics import roc_auc
from mil_dataset import BagTable
from synthetic import generate


def gauss_jordan_inverse(matrix):
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    augmented = np.hstack([a, np.eye(n)])
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(augmented[col:, col])))
        augmented[[col, pivot]] = augmented[[pivot, col]]
        augmented[col] /= augmented[col, col]
        for row in range(n):
            if row != col:
                augmented[row] -= augmented[row, col] * augmented[col]
    return augmented[:, n:]


def _random_spd(rng, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(0.5, 5.0, d)) @ q.T


def test_square_corners():
    points = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    model = fit_cluster_model(points, np.zeros(4, dtype=int), 1)
    np.testing.assert_allclose(model.means[0], [1.0, 1.0])
    np.testing.assert_allclose(model.covariances[0], (1.0 + 1e-6) * np.eye(2), rtol=1e-15)
    np.testing.assert_allclose(model.factors[0] @ model.factors[0].T, model.covariances[0], rtol=1e-12)


def test_single_member_cluster_gets_the_floor():
    model = fit_cluster_model(np.array([[3.0, -1.0]]), np.array([0]), 1)
    np.testing.assert_array_equal(model.means[0], [3.0, -1.0])
    np.testing.assert_array_equal(model.covariances[0], 1e-12 * np.eye(2))


def test_empty_cluster_is_an_error():
    with pytest.raises(ClusteringError):
        fit_cluster_model(np.zeros((3, 2)), np.array([0, 0, 0]), 2)


def test_unit_covariance_distance():
    model = ClusterModel.from_statistics([[0.0, 0.0]], [np.eye(2)], [1], [0.0])
    assert positive_score(model, np.array([3.0, 4.0])) == 25.0


def test_score_at_a_cluster_mean_is_zero():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(200, 3))
    model = fit_cluster_model(points, np.arange(200) % 2, 2)
    for mean in model.means:
        assert abs(positive_score(model, mean)) < 1e-12


def test_against_gauss_jordan_inverse():
    rng = np.random.default_rng(1)
    d, M = 16, 5
    covariances = [_random_spd(rng, d) for _ in range(M)]
    means = rng.normal(size=(M, d)) * 3
    model = ClusterModel.from_statistics(means, covariances, [10] * M, [0.0] * M)
    queries = rng.normal(size=(1000, d)) * 3
    inverses = [gauss_jordan_inverse(c) for c in covariances]
    expected = np.stack([np.einsum("ij,jk,ik->i", queries - mu, inv, queries - mu)
                         for mu, inv in zip(means, inverses)], axis=1)
    distances = cluster_distances(model, queries)
    assert np.max(np.abs(distances - expected) / expected) < 1e-8
    for z, row in zip(queries[:50], distances[:50]):
        assert positive_score(model, z) == pytest.approx(row.min(), rel=1e-12)


def test_rotation_and_scaling_leave_scores_unchanged():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(500, 4)) * [1.0, 2.0, 0.5, 3.0]
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    A = 2.0 * q
    queries = rng.normal(size=(100, 4)) * 2
    base = fit_cluster_model(points, np.zeros(500, dtype=int), 1)
    moved = fit_cluster_model(points @ A.T, np.zeros(500, dtype=int), 1)
    a = cluster_distances(base, queries)[:, 0]
    b = cluster_distances(moved, queries @ A.T)[:, 0]
    np.testing.assert_allclose(b, a, rtol=1e-6)


def test_general_affine_map_changes_scores_only_through_regularization():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(2000, 4))
    A = np.eye(4) + 0.3 * rng.standard_normal((4, 4))
    shift = rng.normal(size=4)
    queries = rng.normal(size=(100, 4))
    base = fit_cluster_model(points, np.zeros(2000, dtype=int), 1)
    moved = fit_cluster_model(points @ A.T + shift, np.zeros(2000, dtype=int), 1)
    a = cluster_distances(base, queries)[:, 0]
    b = cluster_distances(moved, queries @ A.T + shift)[:, 0]
    np.testing.assert_allclose(b, a, rtol=1e-4)


def test_query_dimension_is_checked():
    model = ClusterModel.from_statistics([[0.0, 0.0]], [np.eye(2)], [1], [0.0])
    with pytest.raises(DimensionMismatchError):
        positive_score(model, np.zeros(3))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_query_is_rejected(bad):
    model = ClusterModel.from_statistics([[0.0, 0.0]], [np.eye(2)], [1], [0.0])
    with pytest.raises(ClusteringError, match="non-finite"):
        positive_score(model, np.array([bad, 0.0]))


def test_mean_pooling():
    bags = BagTable.from_membership([0, 1], [0, 1], np.array([0, 0, 0, 1, 1, 1, 1, 1, 1, 1]))
    scores = np.array([1.0, 2.0, 6.0] + [0.7] * 7)
    pooled = pool_bag_scores(scores, bags)
    assert pooled[0] == 3.0
    assert abs(pooled[1] - 0.7) <= 1e-12
    assert pool_bag_scores(scores, bags, "max").tolist() == [6.0, 0.7]


def _fitted_on_negatives(dataset, M=2, seed=0):
    instances, bags = dataset
    negatives = bags.instances_with_bag_label(0)
    clusters = kmeans(instances.features[negatives], M, seed=seed)
    return fit_cluster_model(instances.features[negatives], clusters.assignment, M)


def test_bag_scores_ignore_instance_order():
    dataset = build_dataset([0, 1, 0, 1, 0], bag_size=30, d=3, seed=4)
    model = _fitted_on_negatives(dataset)
    shuffled = shuffle_within_bags(dataset, seed=5)
    a = score_dataset(model, *dataset).bag_scores
    b = score_dataset(model, *shuffled).bag_scores
    np.testing.assert_allclose(b, a, rtol=1e-12, atol=0)


def test_score_set_is_read_only():
    dataset = build_dataset([0, 1], bag_size=10, d=2)
    scores = score_dataset(_fitted_on_negatives(dataset), *dataset)
    with pytest.raises(ValueError):
        scores.instance_scores[0] = 0.0
    lo, hi = scores.anchors
    assert lo <= np.median(scores.instance_scores) <= hi


def test_score_dataset_checks_dimension():
    dataset = build_dataset([0, 1], bag_size=10, d=2)
    other = build_dataset([0, 1], bag_size=10, d=3)
    with pytest.raises(DimensionMismatchError):
        score_dataset(_fitted_on_negatives(dataset), *other)


def test_normalization_anchors():
    values = normalize_scores(np.array([-1.0, 2.0, 3.0, 4.0, 9.0]), (2.0, 4.0))
    assert values.tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]


@pytest.mark.parametrize("anchors", [(1.0, 1.0), (2.0, 1.0)])
def test_degenerate_anchors(anchors):
    with pytest.raises(ScoreNormalizationError):
        normalize_scores(np.array([1.0]), anchors)


def test_min_max_normalization_keeps_auc():
    rng = np.random.default_rng(6)
    scores = rng.normal(size=300)
    labels = (rng.random(300) < 0.3).astype(int)
    normalized = normalize_scores(scores, (scores.min(), scores.max()))
    assert roc_auc(normalized, labels) == roc_auc(scores, labels)


def test_positive_instances_score_higher():
    train = generate(small_synthetic(separation=8.0)).train
    model = _fitted_on_negatives(train, M=3, seed=1)
    scores = score_dataset(model, *train)
    labels = train.instances.instance_label
    assert scores.instance_scores[labels == 1].mean() > scores.instance_scores[labels == 0].mean()
    assert roc_auc(scores.instance_scores, labels) >= 0.95
