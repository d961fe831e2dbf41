import numpy as np
import pytest

from driftbank import numcore as nc
from driftbank.membank import MemoryBank
from driftbank.params import init_params
from driftbank.rollout import ConfigError, ToyBackbone, run, run_with_targets


def setup(rng, H=16, W=16, D=6, steps=5, seed=0):
    bb = ToyBackbone(H, W)
    p = init_params(D, steps, seed=seed)
    p["W_O"] = rng.normal(scale=0.3, size=(D, D))
    p["pos_table"] = rng.normal(scale=0.1, size=(steps, D))
    return bb, p


def fresh(p):
    return MemoryBank(pos_table=nc.Tensor(p["pos_table"]))


def test_patchify_round_trip(rng):
    bb = ToyBackbone(8, 12, patch=4, t_window=2)
    x = rng.normal(size=(3, 2, 8, 12))
    tok = bb.patchify(x)
    assert tok.shape == (3, 6, 32)
    assert np.array_equal(bb.unpatchify(tok, 2).data, x)
    # token 1 is the patch at row block 0, column block 1
    np.testing.assert_array_equal(tok.data[0, 1].reshape(2, 4, 4), x[0, :, 0:4, 4:8])


def test_bad_patch_divisibility():
    with pytest.raises(ConfigError):
        ToyBackbone(10, 12, patch=4)


def test_single_step_same_in_both_modes(rng):
    bb, p = setup(rng)
    x = rng.uniform(size=(5, 16, 16))
    a, _ = run(bb, p, fresh(p), x, 1, mode="corrected")
    b, _ = run(bb, p, fresh(p), x, 1, mode="bypass")
    assert a.data.tobytes() == b.data.tobytes()


def test_twenty_step_protocol(rng):
    bb, p = setup(rng, steps=20)
    bank = fresh(p)
    x = rng.uniform(size=(5, 16, 16))
    out, trace = run(bb, p, bank, x, 20)
    assert out.shape == (20, 16, 16)
    assert len(bank) == 20 and len(trace) == 20
    for r in range(1, 21):
        assert bank.reads_at(r) == set(range(1, r))


def test_identity_backbone_fixed_point():
    P = 4
    bb = ToyBackbone(P, P, patch=P, t_window=2, t_step=1)
    D = P * P
    p = init_params(D, 6)
    p["E_proj"] = np.vstack([np.zeros((D, D)), np.eye(D)])  # keep the latest frame
    p["D_proj"] = np.eye(D)
    p["W_agg"] = np.zeros((D, D))
    x = np.full((3, P, P), 0.37)
    out, _ = run(bb, p, fresh(p), x, 6)
    assert np.array_equal(out.data, np.full((6, P, P), 0.37))


def test_insufficient_context(rng):
    bb, p = setup(rng)
    with pytest.raises(ConfigError):
        run(bb, p, fresh(p), rng.uniform(size=(1, 16, 16)), 2)


def test_bank_must_start_empty(rng):
    bb, p = setup(rng)
    bank = fresh(p)
    bank.write(nc.Tensor(np.zeros((16, 6))), 1)
    with pytest.raises(nc.ContractError):
        run(bb, p, bank, rng.uniform(size=(3, 16, 16)), 2)


def test_deterministic_traces(rng):
    bb, p = setup(rng)
    x = rng.uniform(size=(2, 5, 16, 16))
    a, ta = run(bb, p, fresh(p), x, 5)
    b, tb = run(bb, p, fresh(p), x, 5)
    assert a.data.tobytes() == b.data.tobytes()
    for sa, sb in zip(ta.steps, tb.steps):
        assert sa.posterior.tobytes() == sb.posterior.tobytes()


def test_targets_length_checked(rng):
    bb, p = setup(rng)
    x = rng.uniform(size=(5, 16, 16))
    with pytest.raises(nc.DimensionError):
        run_with_targets(bb, p, fresh(p), x, rng.uniform(size=(3, 16, 16)), 5)


def test_bypass_has_zero_step(rng):
    bb, p = setup(rng)
    x = rng.uniform(size=(5, 16, 16))
    y = rng.uniform(size=(5, 16, 16))
    trace = run_with_targets(bb, p, fresh(p), x, y, 5, mode="bypass")
    for s in trace.steps:
        assert s.diagnostics.prop1.err_after == s.diagnostics.prop1.err_before
        assert not s.diagnostics.prop1.condition_holds


def test_perfect_backbone_has_no_drift():
    # identity latent, a static field is predicted exactly
    P = 4
    bb = ToyBackbone(P, P, patch=P)
    D = P * P
    p = init_params(D, 4)
    p["E_proj"] = np.vstack([np.zeros((D, D)), np.eye(D)])
    p["D_proj"] = np.eye(D)
    x = np.full((3, P, P), 0.2)
    y = np.full((4, P, P), 0.2)
    trace = run_with_targets(bb, p, fresh(p), x, y, 4, mode="bypass")
    for s in trace.steps:
        assert s.diagnostics.prop1.err_before < 1e-20
        assert not s.diagnostics.prop1.condition_holds


def test_teacher_forced_bypass_equals_encode_decode(rng):
    bb, p = setup(rng)
    seq = rng.uniform(size=(7, 16, 16))
    for k in range(2, 7):
        out, _ = run(bb, p, fresh(p), seq[:k], 1, mode="bypass")
        direct = bb.decode(bb.encode(seq[k - 2:k], p), p)
        assert np.array_equal(out.data, direct.data)


def test_batched_rollout_equals_per_sequence(rng):
    bb, p = setup(rng)
    x = rng.uniform(size=(3, 5, 16, 16))
    batched, _ = run(bb, p, fresh(p), x, 4)
    for i in range(3):
        single, _ = run(bb, p, fresh(p), x[i], 4)
        np.testing.assert_allclose(batched.data[i], single.data, rtol=0, atol=1e-12)
