import numpy as np
import pytest

from driftbank import numcore as nc
from driftbank.cle import (CLE_KEYS, context_discrepancy, init_gate, initial_correction,
                           raw_residual)
from driftbank.params import init_params
from oracles import central_diff, cle_forward, mm, rel_err


def random_params(rng, D, scale=0.5):
    p = init_params(D, capacity=4, seed=int(rng.integers(1 << 30)))
    p["W_O"] = rng.normal(scale=scale, size=(D, D))
    return p


def test_raw_residual_examples(rng):
    z = rng.normal(size=(3, 4))
    assert not raw_residual(z, z).data.any()
    c = 0.7
    np.testing.assert_allclose(raw_residual(z + c, z).data, c, atol=1e-15)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_array_equal(raw_residual(a, b).data, -raw_residual(b, a).data)
    with pytest.raises(nc.DimensionError):
        raw_residual(a, rng.normal(size=(3, 3)))


def test_context_discrepancy_examples(rng):
    D = 3
    z = rng.normal(size=(2, D))
    p = {"W_pre": np.eye(D), "W_ref": np.eye(D)}
    assert not context_discrepancy(z, z, p).data.any()
    p = {"W_pre": np.eye(D), "W_ref": np.zeros((D, D))}
    np.testing.assert_array_equal(context_discrepancy(z, rng.normal(size=(2, D)), p).data, z)


def test_context_discrepancy_matches_loops(rng):
    D = 3
    zp, zr = rng.normal(size=(2, D)), rng.normal(size=(2, D))
    p = {"W_pre": rng.normal(size=(D, D)), "W_ref": rng.normal(size=(D, D))}
    ref = np.array(mm(zp, p["W_pre"])) - np.array(mm(zr, p["W_ref"]))
    np.testing.assert_allclose(context_discrepancy(zp, zr, p).data, ref, rtol=0, atol=1e-12)


def test_zero_output_projection_gives_zero(rng):
    D = 4
    p = init_params(D, 4)
    assert not p["W_O"].any()
    d = initial_correction(rng.normal(size=(3, D)), rng.normal(size=(3, D)), p)
    assert not d.data.any()


def test_zero_gate_weights_give_equal_blend(rng):
    D = 3
    p = random_params(rng, D)
    p["W_init"] = np.zeros((2 * D, D))
    zp, zr = rng.normal(size=(2, D)), rng.normal(size=(2, D))
    gate = init_gate(zp, zr, p).data
    assert (gate == 0.5).all()
    blend = 0.5 * (zp - zr) @ p["W_delta"] + 0.5 * (zp @ p["W_pre"] - zr @ p["W_ref"])
    np.testing.assert_allclose(initial_correction(zp, zr, p).data, blend @ p["W_O"], atol=1e-12)


def test_initial_correction_matches_loop_oracle(rng):
    D = 3
    p = random_params(rng, D)
    zp, zr = rng.normal(size=(2, D)), rng.normal(size=(2, D))
    ref, _ = cle_forward(zp, zr, p)
    np.testing.assert_allclose(initial_correction(zp, zr, p).data, np.array(ref), rtol=0, atol=1e-12)


def test_gate_strictly_inside_unit_interval(rng):
    D = 5
    p = random_params(rng, D)
    g = init_gate(rng.normal(size=(6, D)) * 3, rng.normal(size=(6, D)) * 3, p).data
    assert ((g > 0) & (g < 1)).all()


def test_blend_identity(rng):
    # W_delta chosen so that delta @ W_delta == discrepancy: W_pre = W_ref = W_delta
    D = 3
    p = random_params(rng, D)
    W = rng.normal(size=(D, D))
    p.update(W_pre=W, W_ref=W, W_delta=W)
    zp, zr = rng.normal(size=(4, D)), rng.normal(size=(4, D))
    disc = context_discrepancy(zp, zr, p).data
    np.testing.assert_allclose(initial_correction(zp, zr, p).data, disc @ p["W_O"], atol=1e-12)


def test_gradients_for_all_five_matrices(rng):
    D = 3
    p = random_params(rng, D)
    zp, zr = rng.normal(size=(2, D)), rng.normal(size=(2, D))
    w = rng.normal(size=(2, D))
    tape = nc.GradTape()
    with tape:
        tp = {k: tape.watch(p[k], k) for k in CLE_KEYS}
        loss = nc.total(nc.mul(initial_correction(zp, zr, tp), w))
    g = nc.backward(tape, loss)
    for k in CLE_KEYS:
        def f(x, k=k):
            q = dict(p)
            q[k] = x
            return float((initial_correction(zp, zr, q).data * w).sum())
        assert rel_err(g[k], central_diff(f, p[k])) < 1e-4, k
