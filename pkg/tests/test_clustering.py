import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.cluster.hierarchy import fcluster, is_valid_linkage, linkage as scipy_linkage
from scipy.spatial.distance import squareform

from src.clustering import (
    LINKAGES,
    ClusterAssignment,
    Dendrogram,
    ProximityMatrix,
    agglomerative,
    assign_newcomer,
    auto_lambda_grid,
    block_structure_score,
    lambda_for_clusters,
    pairwise_distance,
    per_layer_distance,
)
from src.data_gen import GroundTruthGroups
from src.nn_core import LayerParams, ModelParams, PartialWeights, extract_partial_weights, init_model


def _fp(values):
    values = np.asarray(values, dtype=float)
    return PartialWeights(values, (1, values.size - 1))


def _random_points(rng, m, dim=4):
    return [_fp(rng.normal(size=dim)) for _ in range(m)]


def _block_matrix(groups, within=1.0, between=10.0):
    m = sum(len(g) for g in groups)
    label = {cid: k for k, g in enumerate(groups) for cid in g}
    values = np.array([[0.0 if i == j else (within if label[i] == label[j] else between)
                        for j in range(m)] for i in range(m)])
    return ProximityMatrix(values)


# pairwise_distance

def test_identical_fingerprints_give_zero_matrix():
    fp = _fp([1.0, 2.0, 3.0])
    assert_array_equal(pairwise_distance([fp, fp, fp]).values, np.zeros((3, 3)))


def test_three_four_five():
    matrix = pairwise_distance([_fp([0.0, 0.0]), _fp([3.0, 4.0])])
    assert matrix.values[0, 1] == 5.0
    assert matrix.values[1, 0] == 5.0


def test_pairwise_matches_loop_and_is_metric(rng):
    fps = _random_points(rng, 5)
    matrix = pairwise_distance(fps).values
    for p, q in itertools.product(range(5), repeat=2):
        expected = math.sqrt(sum((a - b) ** 2 for a, b in zip(fps[p].values, fps[q].values)))
        assert abs(matrix[p, q] - expected) < 1e-12
    for p, q, r in itertools.product(range(5), repeat=3):
        assert matrix[p, r] <= matrix[p, q] + matrix[q, r] + 1e-12


def test_pairwise_rejects_bad_input():
    with pytest.raises(ValueError, match="differ in length"):
        pairwise_distance([_fp([1.0, 2.0]), _fp([1.0, 2.0, 3.0])])
    with pytest.raises(ValueError, match="at least 2"):
        pairwise_distance([_fp([1.0, 2.0])])


def test_proximity_matrix_validation():
    with pytest.raises(ValueError, match="symmetric"):
        ProximityMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError, match="diagonal"):
        ProximityMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="negative"):
        ProximityMatrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))


# agglomerative

@pytest.mark.parametrize("linkage", LINKAGES)
def test_lambda_extremes(rng, linkage):
    matrix = pairwise_distance(_random_points(rng, 7))
    _, dendrogram = agglomerative(matrix, linkage)
    above, _ = agglomerative(matrix, linkage, dendrogram.max_merge_distance * 2)
    below, _ = agglomerative(matrix, linkage, dendrogram.min_merge_distance / 2)
    assert above.num_clusters == 1
    assert below.num_clusters == 7
    assert below.labels == {i: i for i in range(7)}


@pytest.mark.parametrize("linkage", LINKAGES)
def test_planted_blocks_recovered(linkage):
    matrix = _block_matrix([[0, 2, 5], [1, 3, 4]], within=1.0, between=10.0)
    assignment, _ = agglomerative(matrix, linkage, 5.0)
    assert assignment.as_partition() == frozenset({frozenset({0, 2, 5}), frozenset({1, 3, 4})})
    # Cluster ids follow the smallest member
    assert assignment.cluster_of(0) == 0
    assert assignment.cluster_of(1) == 1


@pytest.mark.parametrize("linkage", LINKAGES)
def test_matches_scipy_hierarchy(rng, linkage):
    matrix = pairwise_distance(_random_points(rng, 9, dim=3))
    _, dendrogram = agglomerative(matrix, linkage)
    reference = scipy_linkage(squareform(matrix.values), method=linkage)
    assert_allclose(dendrogram.merge_distances(), reference[:, 2], rtol=1e-12)
    assert_array_equal([s.size for s in dendrogram.merges], reference[:, 3])
    for lam in np.linspace(0.5 * reference[0, 2], 1.1 * reference[-1, 2], 9):
        ours, _ = agglomerative(matrix, linkage, lam)
        theirs = fcluster(reference, t=lam, criterion='distance')
        groups = {}
        for cid, label in enumerate(theirs):
            groups.setdefault(label, set()).add(cid)
        assert ours.as_partition() == frozenset(frozenset(g) for g in groups.values())


@pytest.mark.parametrize("linkage", LINKAGES)
def test_dendrogram_shape(rng, linkage):
    matrix = pairwise_distance(_random_points(rng, 8))
    _, dendrogram = agglomerative(matrix, linkage)
    distances = dendrogram.merge_distances()
    assert len(distances) == 7
    assert all(a <= b for a, b in zip(distances, distances[1:]))
    assert dendrogram.merges[-1].size == 8
    assert is_valid_linkage(dendrogram.to_linkage())


@pytest.mark.parametrize("linkage", LINKAGES)
def test_cluster_count_non_increasing_in_lambda(rng, linkage):
    matrix = pairwise_distance(_random_points(rng, 10))
    counts = [agglomerative(matrix, linkage, lam)[0].num_clusters for lam in np.linspace(0.01, 6.0, 40)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_lambda_cut_is_inclusive():
    matrix = ProximityMatrix(np.array([[0.0, 2.0], [2.0, 0.0]]))
    assert agglomerative(matrix, 'single', 2.0)[0].num_clusters == 1
    assert agglomerative(matrix, 'single', 1.999)[0].num_clusters == 2


def test_ties_merge_smallest_pair_first():
    values = np.ones((4, 4)) - np.eye(4)
    assignment, dendrogram = agglomerative(ProximityMatrix(values), 'average', 1.0)
    first = dendrogram.merges[0]
    assert (first.cluster_a, first.cluster_b) == (0, 1)
    assert (dendrogram.merges[1].cluster_a, dendrogram.merges[1].cluster_b) == (4, 2)
    assert assignment.num_clusters == 1
    assert agglomerative(ProximityMatrix(values), 'average', 0.5)[0].num_clusters == 4


def test_relabeling_stability(rng):
    points = _random_points(rng, 8)
    perm = rng.permutation(8)
    base, _ = agglomerative(pairwise_distance(points), 'average', 2.0)
    shuffled, _ = agglomerative(pairwise_distance([points[i] for i in perm]), 'average', 2.0)
    mapped = frozenset(frozenset(int(perm[i]) for i in group) for group in shuffled.as_partition())
    assert mapped == base.as_partition()


def test_client_ids_label_the_assignment():
    matrix = _block_matrix([[0, 1], [2, 3]])
    assignment, dendrogram = agglomerative(matrix, 'complete', 5.0, client_ids=[10, 11, 20, 21])
    assert assignment.labels == {10: 0, 11: 0, 20: 1, 21: 1}
    assert dendrogram.client_ids == [10, 11, 20, 21]
    assert dendrogram.cut(5.0).labels == assignment.labels


def test_agglomerative_rejects_bad_arguments():
    matrix = _block_matrix([[0], [1]])
    with pytest.raises(ValueError, match="linkage"):
        agglomerative(matrix, 'ward')
    with pytest.raises(ValueError, match="positive"):
        agglomerative(matrix, 'single', 0.0)
    with pytest.raises(ValueError, match="client ids"):
        agglomerative(matrix, 'single', 1.0, client_ids=[0, 1, 2])


def test_assignment_requires_contiguous_ids():
    with pytest.raises(ValueError, match="contiguous"):
        ClusterAssignment({0: 0, 1: 2})
    assert ClusterAssignment.from_groups([[3, 1], [0, 2]]).labels == {0: 0, 2: 0, 1: 1, 3: 1}


# threshold helpers

@pytest.mark.parametrize("k", [1, 2, 3, 6])
def test_lambda_for_clusters(rng, k):
    matrix = pairwise_distance(_random_points(rng, 6))
    _, dendrogram = agglomerative(matrix, 'average')
    lam = lambda_for_clusters(dendrogram, k)
    assert dendrogram.cut(lam).num_clusters == k
    assert agglomerative(matrix, 'average', lam)[0].num_clusters == k


def test_lambda_for_clusters_range():
    _, dendrogram = agglomerative(_block_matrix([[0, 1], [2]]), 'single')
    with pytest.raises(ValueError):
        lambda_for_clusters(dendrogram, 0)
    with pytest.raises(ValueError):
        lambda_for_clusters(dendrogram, 4)


def test_auto_lambda_grid_spans_dendrogram(rng):
    _, dendrogram = agglomerative(pairwise_distance(_random_points(rng, 10)), 'average')
    grid = auto_lambda_grid(dendrogram, 8)
    assert len(grid) == 8
    assert grid == sorted(grid)
    assert grid[0] < dendrogram.min_merge_distance
    assert grid[-1] > dendrogram.max_merge_distance
    assert dendrogram.cut(grid[0]).num_clusters == 10
    assert dendrogram.cut(grid[-1]).num_clusters == 1
    with pytest.raises(ValueError):
        auto_lambda_grid(dendrogram, 1)


def test_dendrogram_dict_is_json_ready(rng):
    _, dendrogram = agglomerative(pairwise_distance(_random_points(rng, 4)), 'single')
    data = dendrogram.to_dict()
    assert data['num_leaves'] == 4
    assert len(data['merges']) == 3
    assert Dendrogram.from_dict(data).merge_distances() == dendrogram.merge_distances()


# per-layer distances and block scores

def test_final_layer_distance_equals_fingerprint_distance():
    models = [init_model([4, 5, 3], seed=s) for s in range(4)]
    by_layer = per_layer_distance(models, -1).values
    by_fingerprint = pairwise_distance([extract_partial_weights(m) for m in models]).values
    assert_allclose(by_layer, by_fingerprint, atol=1e-12)
    assert_allclose(per_layer_distance(models, 1).values, by_layer, atol=1e-12)


def test_layer_distance_ignores_other_layers():
    base = init_model([4, 5, 3], seed=0)
    others = []
    for s in range(3):
        model = base.copy()
        model.layers[-1] = LayerParams(np.full((3, 5), float(s)), np.zeros(3))
        others.append(model)
    assert_array_equal(per_layer_distance(others, 0).values, np.zeros((3, 3)))


def test_layer_index_checked():
    models = [init_model([4, 5, 3], seed=0)]
    with pytest.raises(ValueError, match="out of range"):
        per_layer_distance(models, 2)
    with pytest.raises(ValueError, match="congruent"):
        per_layer_distance(models + [init_model([4, 6, 3], seed=0)], 0)


def test_block_score_uniform_matrix_is_one():
    values = np.full((4, 4), 3.0)
    np.fill_diagonal(values, 0.0)
    groups = GroundTruthGroups({0: 0, 1: 0, 2: 1, 3: 1})
    assert block_structure_score(ProximityMatrix(values), groups) == pytest.approx(1.0)


def test_block_score_ratio():
    groups = GroundTruthGroups({0: 0, 1: 0, 2: 1, 3: 1})
    assert block_structure_score(_block_matrix([[0, 1], [2, 3]]), groups) == pytest.approx(10.0)
    zero_within = _block_matrix([[0, 1], [2, 3]], within=0.0)
    assert block_structure_score(zero_within, groups) == math.inf


def test_block_score_matches_pair_enumeration(rng):
    matrix = pairwise_distance(_random_points(rng, 7))
    labels = {i: int(g) for i, g in enumerate(rng.integers(3, size=7))}
    labels.update({0: 0, 1: 0, 2: 1})
    within, between = [], []
    for p, q in itertools.combinations(range(7), 2):
        (within if labels[p] == labels[q] else between).append(matrix.values[p, q])
    expected = np.mean(between) / np.mean(within)
    assert block_structure_score(matrix, GroundTruthGroups(labels)) == pytest.approx(expected, rel=1e-12)


def test_block_score_uses_client_ids():
    groups = GroundTruthGroups({7: 0, 8: 0, 9: 1})
    matrix = _block_matrix([[0, 1], [2]], within=2.0, between=6.0)
    assert block_structure_score(matrix, groups, client_ids=[7, 8, 9]) == pytest.approx(3.0)


def test_block_score_rejections():
    with pytest.raises(ValueError, match="2 groups"):
        block_structure_score(_block_matrix([[0, 1, 2]]), GroundTruthGroups({0: 0, 1: 0, 2: 0}))
    with pytest.raises(ValueError, match="two members"):
        block_structure_score(_block_matrix([[0], [1]]), GroundTruthGroups({0: 0, 1: 1}))


# newcomer assignment

def test_single_cluster_always_wins():
    assert assign_newcomer(_fp([100.0, 100.0]), {0: _fp([0.0, 0.0])}) == 0


def test_exact_representative_match():
    reps = {k: _fp([float(k), 2.0 * k, -1.0]) for k in range(4)}
    for k in range(4):
        assert assign_newcomer(reps[k], reps) == k


def test_matches_linear_scan(rng):
    reps = {k: _fp(rng.normal(size=5)) for k in range(3)}
    for _ in range(20):
        fp = _fp(rng.normal(size=5))
        expected = min(reps, key=lambda k: (np.linalg.norm(fp.values - reps[k].values), k))
        assert assign_newcomer(fp, reps) == expected


def test_newcomer_ties_go_to_smallest_id():
    reps = {2: _fp([1.0, 0.0]), 1: _fp([-1.0, 0.0])}
    assert assign_newcomer(_fp([0.0, 0.0]), reps) == 1


def test_newcomer_rejections():
    with pytest.raises(ValueError, match="No cluster"):
        assign_newcomer(_fp([0.0, 0.0]), {})
    with pytest.raises(ValueError, match="length"):
        assign_newcomer(_fp([0.0, 0.0]), {0: _fp([0.0, 0.0, 0.0])})
