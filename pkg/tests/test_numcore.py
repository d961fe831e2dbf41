import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftbank import numcore as nc
from oracles import central_diff, rel_err

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def grad_of(fn, *arrays):
    """Analytic gradients of sum(fn(*tensors) * fixed random weights)."""
    w = None
    tape = nc.GradTape()
    with tape:
        xs = [tape.watch(a, f"x{i}") for i, a in enumerate(arrays)]
        out = fn(*xs)
        w = np.random.default_rng(7).normal(size=out.shape)
        loss = nc.total(nc.mul(out, w))
    g = nc.backward(tape, loss)
    return [g[f"x{i}"] for i in range(len(arrays))], w


def check_fd(fn, *arrays, tol=1e-4):
    analytic, w = grad_of(fn, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return float((fn(*[nc.Tensor(v) for v in args]).data * w).sum())
        num = central_diff(f, a)
        assert rel_err(analytic[i], num) < tol, (fn, i)


def test_matmul_examples():
    a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nc.matmul(nc.Tensor(np.eye(2)), a).data, a.data)
    assert nc.matmul(nc.Tensor([[1.0, 2.0]]), nc.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    assert not nc.matmul(nc.zeros((3, 2)), a).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.matmul(nc.zeros((2, 3)), nc.zeros((2, 3)))


def test_sigmoid_examples():
    assert nc.sigmoid(nc.Tensor(0.0)).item() == 0.5
    with np.errstate(over="raise"):
        assert nc.sigmoid(nc.Tensor([1000.0])).data[0] == 1.0
        assert 0.0 <= nc.sigmoid(nc.Tensor([-1000.0])).data[0] < 1e-200


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax(nc.Tensor([2.0, 2.0, 2.0])).data, [1 / 3] * 3, atol=1e-15)
    y = nc.softmax(nc.Tensor([1000.0, 0.0])).data
    assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300
    np.testing.assert_allclose(nc.softmax(nc.Tensor(np.log([1.0, 2.0, 3.0]))).data,
                               [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    with pytest.raises(nc.DimensionError):
        nc.softmax(nc.Tensor(np.zeros(0)))


def test_pools():
    z = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert nc.mean_pool_tokens(z).data.tolist() == [2.0, 3.0]
    assert nc.mean_pool_features(z).data.tolist() == [1.5, 3.5]
    one = nc.Tensor([[5.0, -1.0]])
    assert nc.mean_pool_tokens(one).data.tolist() == [5.0, -1.0]
    assert nc.mean_pool_features(nc.Tensor([[5.0], [-1.0]])).data.tolist() == [5.0, -1.0]
    assert not nc.mean_pool_tokens(nc.zeros((3, 4))).data.any()
    assert not nc.mean_pool_features(nc.zeros((3, 4))).data.any()


def test_backward_examples():
    tape = nc.GradTape()
    with tape:
        x = tape.watch(np.array(3.0), "x")
        y = tape.watch(np.array(2.0), "y")
        unused = tape.watch(np.ones((2, 2)), "u")
        loss = nc.mul(x, y)
    g = nc.backward(tape, loss)
    assert g["x"] == 2.0 and g["y"] == 3.0
    assert not g["u"].any() and g["u"].shape == (2, 2)

    tape = nc.GradTape()
    with tape:
        x = tape.watch(np.array(4.0), "x")
    assert nc.backward(tape, x)["x"] == 1.0


def test_backward_rejects_non_scalar():
    tape = nc.GradTape()
    with tape:
        x = tape.watch(np.ones(3), "x")
        y = nc.scale(x, 2.0)
    with pytest.raises(nc.ContractError):
        nc.backward(tape, y)


def test_checked_mode_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        nc.Tensor([1.0, np.nan])
    nc.set_checked(False)
    nc.Tensor([np.inf])


def test_tensor_does_not_freeze_caller_array():
    a = np.ones(3)
    nc.Tensor(a)
    a[0] = 2.0


@pytest.mark.parametrize("name,fn,shapes", [
    ("matmul", nc.matmul, [(3, 4), (4, 2)]),
    ("matmul_batched", nc.matmul, [(2, 3, 4), (4, 5)]),
    ("matmul_vec", nc.matmul, [(4,), (4, 3)]),
    ("matmul_matvec", nc.matmul, [(3, 4), (4,)]),
    ("add_bcast", nc.add, [(2, 3, 4), (3, 1)]),
    ("sub_bcast", nc.sub, [(3, 4), (4,)]),
    ("mul_bcast", nc.mul, [(2, 3), (1, 3)]),
    ("square", nc.square, [(3, 3)]),
    ("sigmoid", nc.sigmoid, [(4, 3)]),
    ("softmax", nc.softmax, [(3, 5)]),
    ("pool_tokens", nc.mean_pool_tokens, [(2, 5, 3)]),
    ("pool_features", nc.mean_pool_features, [(4, 3)]),
    ("sq_distance", nc.sq_distance, [(2, 1, 4), (3, 4)]),
    ("concat", lambda a, b: nc.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    ("stack", lambda a, b: nc.stack([a, b], axis=-3), [(3, 2), (3, 2)]),
    ("slice", lambda a: a[..., 1:, :], [(2, 4, 3)]),
    ("permute", lambda a: nc.permute(a, (2, 0, 1)), [(2, 3, 4)]),
    ("reshape", lambda a: nc.reshape(a, (6, 2)), [(3, 4)]),
    ("mean_all", lambda a: nc.mean(a), [(3, 4)]),
    ("scale", lambda a: nc.scale(a, -2.5), [(3,)]),
    ("expand_swap", lambda a: nc.swap_last(nc.expand_dims(a, -1)), [(3, 2)]),
])
def test_primitive_gradients_match_finite_differences(name, fn, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) for s in shapes]
    check_fd(fn, *arrays)


def test_composed_graph_gradient():
    rng = np.random.default_rng(3)
    A, B, c = rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)

    def fn(a, b, v):
        h = nc.sigmoid(nc.matmul(a, b))
        s = nc.softmax(nc.matmul(h, v))
        return nc.mul(nc.mean_pool_tokens(nc.mul(h, nc.expand_dims(s, -1))), v)

    check_fd(fn, A, B, c)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    y = nc.softmax(nc.Tensor(x)).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert (y > 0).all()
    np.testing.assert_allclose(nc.softmax(nc.Tensor(x + c)).data, y, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-60, 60)))
def test_sigmoid_symmetry(x):
    a = nc.sigmoid(nc.Tensor(x)).data
    b = nc.sigmoid(nc.Tensor(-x)).data
    np.testing.assert_allclose(a + b, 1.0, rtol=0, atol=1e-12)


def test_matmul_associativity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, c = (nc.Tensor(rng.normal(size=(4, 4))) for _ in range(3))
        left = nc.matmul(nc.matmul(a, b), c).data
        right = nc.matmul(a, nc.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


def test_ops_outside_tape_are_untracked():
    tape = nc.GradTape()
    x = tape.watch(np.ones(2), "x")
    y = nc.scale(x, 2.0)
    assert y.node is None and not tape.records
