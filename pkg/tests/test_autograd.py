import numpy as np
import pytest

import gradsuite
from supergauss import autograd as ag
from supergauss.scene import InvalidParameterError


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("case", [c for c in gradsuite.CASES if c not in ("rasterizer", "priornet")])
def test_op_matches_central_differences(case, seed):
    report = gradsuite.run_case(case, seed)
    assert report.passed, report.failures[:3]


def test_square_at_three():
    x = ag.Tensor(3.0)
    ag.backward(ag.square(x))
    assert x.grad == 6.0


def test_sum_of_matmul_gradient_pattern(rng):
    a, b = ag.Tensor(rng.normal(size=(3, 4))), ag.Tensor(rng.normal(size=(4, 2)))
    ag.backward(ag.sum(a @ b))
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.value.T)
    assert np.allclose(b.grad, a.value.T @ np.ones((3, 2)))
    h = 1e-5
    for i in range(3):
        for j in range(4):
            ap, am = a.value.copy(), a.value.copy()
            ap[i, j] += h
            am[i, j] -= h
            fd = (np.sum(ap @ b.value) - np.sum(am @ b.value)) / (2 * h)
            assert abs(fd - a.grad[i, j]) < 1e-8


def test_identity_matmul(rng):
    a = rng.normal(size=(4, 4))
    assert np.array_equal((ag.Tensor(np.eye(4)) @ a).value, a)


def test_softmax_single_entry():
    assert ag.softmax_rows(np.array([[4.2]])).value.tolist() == [[1.0]]


def test_masked_softmax_zero_weight():
    w = ag.softmax_rows(np.array([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).value
    assert w[0, 1] == 0.0 and w.sum() == pytest.approx(1.0)


def test_fully_masked_softmax_row_is_zero():
    x = ag.Tensor(np.array([[1.0, 2.0], [0.5, -0.5]]))
    w = ag.softmax_rows(x, mask=np.array([[False, False], [True, True]]))
    assert w.value[0].tolist() == [0.0, 0.0] and w.value[1].sum() == pytest.approx(1.0)
    ag.backward(ag.sum(w * np.array([[1.0, 2.0], [3.0, -1.0]])))
    assert np.all(np.isfinite(x.grad)) and x.grad[0].tolist() == [0.0, 0.0]


def test_segment_max_example():
    out = ag.segment_max(np.array([3.0, 5.0, -1.0]), np.array([0, 0, 1]), 2)
    assert out.value.tolist() == [5.0, -1.0]
    assert out.aux.tolist() == [1, 2]


def test_segment_max_routes_gradient_to_argmax():
    x = ag.Tensor(np.array([[3.0, 0.0], [5.0, -2.0], [-1.0, 4.0]]))
    out = ag.segment_max(x, np.array([0, 0, 1]), 2)
    ag.backward(ag.sum(out * np.array([[1.0, 2.0], [3.0, 4.0]])))
    assert x.grad.tolist() == [[0.0, 2.0], [1.0, 0.0], [3.0, 4.0]]


def test_segment_max_ties_pick_lowest_row():
    out = ag.segment_max(np.array([[1.0], [1.0]]), np.array([0, 0]), 1)
    assert out.aux.tolist() == [[0]]


def test_broadcast_shape_mismatch_names_op():
    with pytest.raises(InvalidParameterError, match="mul"):
        ag.mul(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(InvalidParameterError, match="matmul"):
        ag.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_scalar_loss_rejected():
    with pytest.raises(InvalidParameterError):
        ag.backward(ag.Tensor(np.ones(3)))


def test_shared_subexpression_accumulates():
    x = ag.Tensor(2.0)
    y = x * x
    ag.backward(y * y + y)
    assert x.grad == pytest.approx(4 * 8 + 4)


def test_grad_check_on_linear_function(rng):
    store = ag.ParamStore()
    store.add("x", rng.normal(size=5))
    w = rng.normal(size=5)
    report = ag.grad_check(lambda: ag.sum(store["x"] * w), store)
    assert report.passed
    assert max(report.max_rel_error.values()) <= 1e-9


def test_grad_check_flags_relu_kink():
    store = ag.ParamStore()
    store.add("x", np.array([0.0, 1.0, -1.0]))
    report = ag.grad_check(lambda: ag.sum(ag.relu(store["x"])), store)
    assert report.kinks == [("x", 0)]
    assert report.passed


def test_grad_check_detects_wrong_gradient():
    store = ag.ParamStore()
    store.add("x", np.array([0.3, -0.7]))

    def wrong():
        x = store["x"]
        return ag.sum(ag.custom("bad_square", [x], x.value ** 2, lambda g: (g * x.value,)))
    report = ag.grad_check(wrong, store)
    assert not report.passed and len(report.failures) == 2


def test_grad_check_fails_on_nan():
    store = ag.ParamStore()
    store.add("x", np.array([0.3]))
    report = ag.grad_check(lambda: ag.sum(store["x"] * np.nan), store)
    assert not report.passed


def test_param_store_round_trip(tmp_path, rng):
    store = ag.ParamStore()
    store.add("net.w", rng.normal(size=(3, 4)))
    store.add("scalar", 2.5)
    store.add("gauss.positions", rng.normal(size=(7, 3)))
    store.save(tmp_path / "p.bin")
    back = ag.ParamStore.load(tmp_path / "p.bin")
    assert list(back) == list(store)
    for name in store:
        assert np.array_equal(back[name].value, store[name].value)
        assert back[name].shape == store[name].shape


def test_param_store_version_mismatch(tmp_path, rng):
    store = ag.ParamStore()
    store.add("w", rng.normal(size=2))
    path = tmp_path / "p.bin"
    store.save(path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(ag.CheckpointVersionError, match="version 99"):
        ag.ParamStore.load(path)
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ag.CheckpointVersionError):
        ag.ParamStore.load(path)


def test_param_store_duplicate_name():
    store = ag.ParamStore()
    store.add("w", 1.0)
    with pytest.raises(InvalidParameterError):
        store.add("w", 2.0)
