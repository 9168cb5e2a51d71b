import numpy as np
import pytest

from oracles import brute_force_optimum, descriptors_eig, partition_energy, random_connected_graph, set_partitions
from supergauss.data import cluster_purity
from supergauss.neighborhood import build_knn
from supergauss.partition import cut_pursuit, energy, group_stats, tune_mu
from supergauss.scene import GaussianSet, InvalidParameterError

CHAIN = np.array([[0, 1], [1, 2], [2, 3]])


def test_oracle_enumerates_bell_numbers():
    assert [sum(1 for _ in set_partitions(n)) for n in range(1, 7)] == [1, 2, 5, 15, 52, 203]


def test_chain_example():
    part = cut_pursuit(np.array([0.0, 0, 10, 10]), CHAIN, 1.0, min_group_size=1)
    assert part.energy == 1.0
    assert part.assignment.tolist() == [0, 0, 1, 1]
    best, labels = brute_force_optimum(np.array([0.0, 0, 10, 10]), CHAIN, 1.0)
    assert best == 1.0 and labels == [0, 0, 1, 1]


def test_large_mu_gives_single_group(rng):
    f = rng.normal(size=(30, 4))
    edges = random_connected_graph(rng, 30, 20)
    total = float(np.sum((f - f.mean(0)) ** 2))
    part = cut_pursuit(f, edges, total)
    assert part.n_groups == 1
    assert part.energy == pytest.approx(total, rel=1e-12)


def test_zero_mu_makes_groups_constant():
    f = np.repeat(np.array([[0.0, 1], [3, 3], [-2, 5]]), 5, axis=0)
    edges = np.array([(i, i + 1) for i in range(14)])
    part = cut_pursuit(f, edges, 0.0, min_group_size=1)
    assert part.energy == 0.0
    for members in part.groups():
        assert np.all(f[members] == f[members[0]])


def test_disconnected_components_are_separate_groups():
    f = np.zeros((6, 1))
    part = cut_pursuit(f, np.array([[0, 1], [1, 2], [3, 4], [4, 5]]), 1e6, min_group_size=1)
    assert part.n_groups == 2


def test_empty_features_rejected():
    with pytest.raises(InvalidParameterError):
        cut_pursuit(np.zeros((0, 3)), np.zeros((0, 2), int), 1.0)
    with pytest.raises(InvalidParameterError):
        cut_pursuit(np.zeros((3, 3)), CHAIN[:2], -1.0)


def test_energy_matches_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(3, 12))
        f = rng.normal(size=(n, 3))
        edges = random_connected_graph(rng, n, 3)
        labels = rng.integers(0, 3, n)
        labels = np.unique(labels, return_inverse=True)[1]
        d, b = energy(f, labels, edges, 0.7)
        assert d + b == pytest.approx(partition_energy(f, labels, edges, 0.7), rel=1e-12)


def test_small_groups_merged(rng):
    f = np.concatenate([np.zeros((20, 2)), [[50.0, 50.0]], np.ones((20, 2))])
    edges = np.array([(i, i + 1) for i in range(40)])
    part = cut_pursuit(f, edges, 0.01, min_group_size=3)
    assert part.sizes.min() >= 3


@pytest.mark.parametrize("seed", range(10))
def test_partition_is_disjoint_cover_of_connected_groups(seed):
    rng = np.random.default_rng(seed)
    n = 60
    f = np.concatenate([rng.normal(c, 0.3, (n // 3, 3)) for c in (0, 3, 6)])
    edges = random_connected_graph(rng, n, 60)
    part = cut_pursuit(f, edges, 0.5)
    assert part.assignment.shape == (n,)
    assert set(part.assignment.tolist()) == set(range(part.n_groups))
    groups = part.groups()
    assert sorted(np.concatenate(groups).tolist()) == list(range(n))
    assert np.allclose(part.values, [f[g].mean(0) for g in groups])


def test_group_stats_examples(rng):
    n = 9
    pos = np.zeros((n, 3))
    pos[:3, 0] = [-1, 1, 0]
    pos[3:6] = [[0, 0, 0], [0, 0, 1], [0, 0, 2.5]]
    pos[6:] = rng.normal(size=(3, 3))
    scene = GaussianSet(pos, np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n))
    part = cut_pursuit(np.repeat([0.0, 1.0, 2.0], 3)[:, None] * 100, np.array([(i, i + 1) for i in range(8)]), 1.0)
    part = group_stats(part, scene)
    assert np.allclose(part.centroids[0], 0)
    assert part.linearity[0] == pytest.approx(1.0, abs=1e-12)
    assert part.linearity[1] == pytest.approx(1.0, abs=1e-12)
    lin, pla, sca, ver = descriptors_eig(pos[6:])
    assert np.allclose([part.linearity[2], part.planarity[2], part.scattering[2], part.verticality[2]],
                       [lin, pla, sca, ver], atol=1e-12)


def test_tune_mu_target_one_is_component_count(rng):
    f = rng.normal(size=(40, 3))
    edges = np.concatenate([random_connected_graph(rng, 20, 10), random_connected_graph(rng, 20, 10) + 20])
    with pytest.warns(UserWarning, match="not reached"):
        search = tune_mu(f, edges, (1, 1), min_group_size=1)
    assert search.partition.n_groups == 2
    assert not search.in_range


def test_tune_mu_target_n_with_distinct_features(rng):
    f = rng.normal(size=(12, 2)) * 10
    edges = random_connected_graph(rng, 12, 8)
    search = tune_mu(f, edges, (12, 12), min_group_size=1)
    assert search.partition.n_groups == 12 and search.in_range


def test_tune_mu_three_clusters():
    rng = np.random.default_rng(7)
    centers = np.array([[0, 0, 0], [8, 0, 0], [0, 8, 0.0]])
    labels = np.repeat(np.arange(3), 100)
    f = centers[labels] + rng.normal(0, 0.5, (300, 3))
    search = tune_mu(f, build_knn(f, 10).edges, (3, 3))
    assert search.partition.n_groups == 3
    assert cluster_purity(labels, search.partition.assignment) == 1.0


def test_tune_mu_rejects_bad_target(rng):
    with pytest.raises(InvalidParameterError):
        tune_mu(rng.normal(size=(5, 2)), CHAIN, (4, 2))
