import numpy as np
import pytest

import gradsuite
from supergauss import autograd as ag
from supergauss.priornet import (ATTRIBUTES, NetConfig, attention_block, group_pool, local_neighbors,
                                 positional_encoding, predict_attributes)
from supergauss.scene import InvalidParameterError


def _attn_store(rng, d, prefix="p."):
    store = ag.ParamStore()
    for name in ("Wq", "Wk", "Wv", "Wo"):
        store.add(prefix + name, rng.normal(0, 0.5, (d, d)))
    store.add(prefix + "bo", rng.normal(0, 0.1, d))
    return store


def _gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def test_encoding_of_zero():
    enc = positional_encoding(np.zeros((2, 3)), 4, passthrough=False).value
    assert np.array_equal(enc, np.tile([0.0, 1.0], (2, 12)))


@pytest.mark.parametrize("freqs", [1, 4, 6])
def test_encoding_length(freqs, rng):
    x = rng.uniform(-1, 1, (5, 3))
    assert positional_encoding(x, freqs).shape == (5, 6 * freqs + 3)
    assert positional_encoding(x, freqs, passthrough=False).shape == (5, 6 * freqs)


def test_encoding_layout(rng):
    x = rng.uniform(-1, 1, (4, 3))
    enc = positional_encoding(x, 2, passthrough=False).value
    # coordinate-major: x sin f0, x cos f0, x sin f1, x cos f1, then y ...
    assert np.allclose(enc[:, 0], np.sin(np.pi * x[:, 0]))
    assert np.allclose(enc[:, 3], np.cos(2 * np.pi * x[:, 0]))
    assert np.allclose(enc[:, 6], np.sin(2 * np.pi * x[:, 1]))
    assert np.allclose(enc[:, 8], np.sin(np.pi * x[:, 2]))


def test_encoding_periodic(rng):
    x = rng.uniform(-1, 1, (10, 3))
    a = positional_encoding(x, 6, passthrough=False).value
    b = positional_encoding(x + 2.0, 6, passthrough=False).value
    assert np.abs(a - b).max() < 1e-12


def test_encoding_needs_frequency():
    with pytest.raises(InvalidParameterError):
        positional_encoding(np.zeros((1, 3)), 0)


def test_group_pool_singleton_and_dominance(rng):
    pos = rng.normal(size=(5, 3))
    rest = rng.normal(size=(5, 10))
    rest[2] = rest.max(axis=0) + 1.0
    tokens = group_pool(pos, rest, np.array([0, 1, 1, 1, 1]), 2)
    assert np.array_equal(tokens.centers.value[0], pos[0])
    assert np.array_equal(tokens.rest.value[0], rest[0])
    assert np.array_equal(tokens.rest.value[1], rest[2])
    assert np.allclose(tokens.centers.value[1], pos[1:].mean(0))


def test_single_token_attention(rng):
    d = 8
    store = _attn_store(rng, d)
    u = rng.normal(size=(1, d))
    e, w = attention_block(ag.Tensor(u), store, "p.", heads=2)
    assert np.all(w.value == 1.0)
    wv, wo, bo = (store["p." + n].value for n in ("Wv", "Wo", "bo"))
    assert np.allclose(e.value, u + _gelu(u @ wv) @ wo + bo, atol=1e-14)


def test_identical_tokens_split_evenly(rng):
    store = _attn_store(rng, 8)
    u = np.tile(rng.normal(size=(1, 8)), (2, 1))
    e, w = attention_block(ag.Tensor(u), store, "p.", heads=2)
    assert np.allclose(w.value, 0.5)
    assert np.array_equal(e.value[0], e.value[1])


def test_global_attention_permutation_equivariant(rng):
    store = _attn_store(rng, 8)
    u = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    e, _ = attention_block(ag.Tensor(u), store, "p.", heads=4)
    ep, _ = attention_block(ag.Tensor(u[perm]), store, "p.", heads=4)
    assert np.abs(ep.value - e.value[perm]).max() < 1e-12


def test_local_attention_single_gaussian(rng):
    store = _attn_store(rng, 8)
    idx, mask = local_neighbors(np.zeros((1, 0), dtype=np.int64), 10)
    _, w = attention_block(ag.Tensor(rng.normal(size=(1, 8))), store, "p.", 2, neighbors=idx, mask=mask)
    assert w.value[0, 0].tolist() == [1.0, 1.0]
    assert np.all(w.value[0, 1:] == 0)


def test_local_attention_uniform_for_identical_tokens(rng):
    n = 20
    store = _attn_store(rng, 8)
    knn = np.stack([np.roll(np.arange(n), -s) for s in range(1, 11)], axis=1)
    idx, mask = local_neighbors(knn, 10)
    u = np.tile(rng.normal(size=(1, 8)), (n, 1))
    _, w = attention_block(ag.Tensor(u), store, "p.", 2, neighbors=idx, mask=None)
    assert np.allclose(w.value, 1 / 11, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_sparse_matches_dense_masked_attention(seed):
    rng = np.random.default_rng(seed)
    n, d, k = 25, 8, 10
    store = _attn_store(rng, d)
    u = rng.normal(size=(n, d))
    knn = np.stack([rng.choice(np.delete(np.arange(n), i), k, replace=False) for i in range(n)])
    idx, _ = local_neighbors(knn, k)
    sparse, _ = attention_block(ag.Tensor(u), store, "p.", 2, neighbors=idx)
    dense_mask = np.zeros((n, n), dtype=bool)
    dense_mask[np.arange(n)[:, None], idx] = True
    dense, _ = attention_block(ag.Tensor(u), store, "p.", 2, mask=dense_mask[None])
    assert np.abs(sparse.value - dense.value).max() < 1e-10


def _base(rng, n=7):
    q = rng.normal(size=(n, 4))
    return {"positions": rng.normal(size=(n, 3)), "rotations": q, "log_scales": np.log(rng.uniform(.05, .2, (n, 3))),
            "color_logits": rng.normal(size=(n, 3)), "opacity_logits": rng.normal(size=n)}


def test_zero_heads_give_identity(rng):
    base = _base(rng)
    zeros = {a: np.zeros((7, k)) for a, k in ATTRIBUTES.items()}
    for deltas in (None, zeros):
        e = predict_attributes(base, deltas, 2.0)
        assert np.array_equal(e.positions.value, base["positions"])
        assert np.allclose(e.rotations.value, base["rotations"] / np.linalg.norm(base["rotations"], axis=1,
                                                                                  keepdims=True), atol=1e-15)
        assert np.array_equal(e.log_scales.value, base["log_scales"])


def test_effective_ranges(rng):
    base = _base(rng)
    # float64 sigmoid rounds to exactly 1 beyond ~37, so stay inside that band
    deltas = {a: rng.normal(0, 8, (7, k)) for a, k in ATTRIBUTES.items()}
    e = predict_attributes(base, deltas, 2.0, NetConfig())
    for t in (e.colors, e.opacities):
        assert np.all((t.value > 0) & (t.value < 1))
    assert np.all(np.abs(e.positions.value - base["positions"]) <= 0.05 * 2.0 + 1e-15)
    assert np.all(e.log_scales.value <= np.log(2.0) + 1e-12)


def test_config_rejects_bad_heads():
    with pytest.raises(InvalidParameterError):
        NetConfig(d_model=10, heads=4)


@pytest.mark.parametrize("seed", range(2))
def test_network_gradients(seed):
    report = gradsuite.run_case("priornet", seed)
    assert report.passed, report.failures[:3]


def test_full_loss_gradients_through_network_and_renderer():
    store, f = gradsuite.priornet_full_loss(0)
    report = ag.grad_check(f, store, max_entries=3)
    assert report.passed, report.failures[:3]
    assert set(report.max_rel_error) == set(store.params)
