import numpy as np
import pytest

import gradsuite
from oracles import d_avg_loop, d_ctr_loop, midranks, spearman_loop, ssim_loop
from supergauss import objective as ob
from supergauss.neighborhood import build_knn
from supergauss.scene import InvalidParameterError


def test_d_avg_pair():
    assert ob.d_avg(np.array([[0, 0, 0], [2, 0, 0.0]]), np.array([[0, 1]])).value == pytest.approx(2.0, abs=4e-8)


def test_d_avg_coincident():
    assert ob.d_avg(np.ones((5, 3)), build_knn(np.random.default_rng(0).normal(size=(5, 3)), 2).edges).value == 0


def test_d_avg_matches_loop_oracle(rng):
    x = rng.normal(size=(50, 3))
    edges = build_knn(x, 6).edges
    assert abs(float(ob.d_avg(x, edges).value) - d_avg_loop(x, edges)) < 1e-12


def test_d_avg_isolated_node_contributes_zero():
    x = np.array([[0, 0, 0], [1, 0, 0], [9, 9, 9.0]])
    assert float(ob.d_avg(x, np.array([[0, 1]])).value) == pytest.approx(2 / 3, abs=1e-7)


def test_d_ctr_symmetric_pair():
    v = float(ob.d_ctr(np.array([[-1, 0, 0], [1, 0, 0.0]]), np.array([0, 0])).value)
    assert v == pytest.approx(1.0, abs=1e-7)


def test_d_ctr_singletons(rng):
    v = float(ob.d_ctr(rng.normal(size=(6, 3)), np.arange(6)).value)
    assert 0 <= v < 1e-14


def test_d_ctr_matches_loop_oracle(rng):
    x = rng.normal(size=(40, 3))
    groups = rng.integers(0, 5, 40)
    groups = np.unique(groups, return_inverse=True)[1]
    assert abs(float(ob.d_ctr(x, groups).value) - d_ctr_loop(x, groups)) < 1e-12


def test_intra_group_edges():
    edges = np.array([[0, 1], [1, 2], [2, 3]])
    assert ob.intra_group_edges(edges, np.array([0, 0, 1, 1])).tolist() == [[0, 1], [2, 3]]


def test_l_pos_and_total_arithmetic():
    assert ob.l_pos(2.0, 1.0) == 3.0
    w = ob.LossWeights(pos=0.0, mask=0.0)
    assert ob.l_total(0.1, 0.2, 5.0, 5.0, w) == pytest.approx(0.12)
    assert ob.l_total(0.0, 0.0, 0.0, 0.0) == 0.0


def test_identical_images_give_zero_total(rng):
    img = rng.uniform(size=(16, 16, 3))
    w = ob.LossWeights(pos=0.0, mask=0.0)
    total = ob.l_total(ob.l1_loss(img, img), 1 - ob.ssim_tensor(img, img), 1.0, 1.0, w)
    assert abs(float(total.value)) < 1e-12


def test_loss_weights_validated():
    with pytest.raises(InvalidParameterError):
        ob.LossWeights(ssim_blend=1.5)
    with pytest.raises(InvalidParameterError):
        ob.LossWeights(pos=-1)


def test_mask_loss_examples(rng):
    m = rng.random((8, 8)) < 0.5
    assert float(ob.mask_loss(m.astype(float), m).value) == 0.0
    assert float(ob.mask_loss(np.ones((8, 8)), np.zeros((8, 8), bool)).value) == 1.0
    a = rng.uniform(size=(8, 8))
    loop = sum((a[i, j] - m[i, j]) ** 2 for i in range(8) for j in range(8)) / 64
    assert abs(float(ob.mask_loss(a, m).value) - loop) < 1e-12
    with pytest.raises(InvalidParameterError):
        ob.mask_loss(np.ones((8, 8)), np.ones((4, 4)))


def test_masked_l1(rng):
    a, b = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
    m = rng.random((4, 5)) < 0.5
    expected = np.abs(a - b)[m].sum() / (3 * m.sum())
    assert float(ob.l1_loss(a, b, m).value) == pytest.approx(expected, abs=1e-14)


def test_ssim_identical_is_one(rng):
    img = rng.uniform(size=(12, 12, 3))
    assert ob.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_windowed_loop(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(14, 13, 2))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ob.ssim(a, b) - ssim_loop(a, b)) < 1e-12


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert ob.psnr(a, a) == 100.0
    assert ob.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_depth_metrics_examples(rng):
    d = rng.uniform(1, 5, 200)
    assert ob.srocc(d, np.exp(d)) == pytest.approx(1.0, abs=1e-12)
    assert ob.srocc(d, -d) == pytest.approx(-1.0, abs=1e-12)
    assert ob.depth_mae(d, d + 0.25) == pytest.approx(0.25)
    with pytest.raises(InvalidParameterError):
        ob.srocc(d, d, np.zeros(200, bool))
    with pytest.raises(InvalidParameterError):
        ob.depth_mae(d, d, np.zeros(200, bool))


@pytest.mark.parametrize("seed", range(5))
def test_srocc_matches_rank_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 12, 150).astype(float)   # many ties
    b = a + rng.normal(0, 3, 150)
    valid = rng.random(150) < 0.8
    assert abs(ob.srocc(a, b, valid) - spearman_loop(a[valid], b[valid])) < 1e-12


def test_midrank_oracle():
    assert midranks([10, 20, 20, 5]) == [2.0, 3.5, 3.5, 1.0]


@pytest.mark.parametrize("case", ["d_avg", "d_ctr", "ssim", "mask_l1"])
def test_gradients(case):
    for seed in range(2):
        assert gradsuite.run_case(case, seed).passed
