import numpy as np
import pytest

from driftbank import numcore as nc
from driftbank.membank import CapacityError, EmptyMemoryError, MemoryBank


def latent(rng, L=3, D=2):
    return nc.Tensor(rng.normal(size=(L, D)))


def test_first_write_becomes_reference(rng):
    bank = MemoryBank.empty(4, 2)
    z = latent(rng)
    bank.write(z, 1)
    assert len(bank) == 1
    assert bank.reference(latent(rng)) is z


def test_drift_sequence_length_matches(rng):
    bank = MemoryBank.empty(5, 2)
    for r in (1, 2, 3):
        bank.write(latent(rng), r)
    assert bank.drift_sequence().shape == (3, 3, 2)


def test_non_monotone_write_rejected(rng):
    bank = MemoryBank.empty(4, 2)
    bank.write(latent(rng), 2)
    with pytest.raises(nc.ContractError):
        bank.write(latent(rng), 2)
    with pytest.raises(nc.ContractError):
        bank.write(latent(rng), 1)


def test_capacity_is_hard(rng):
    bank = MemoryBank.empty(2, 2)
    bank.write(latent(rng), 1)
    bank.write(latent(rng), 2)
    with pytest.raises(CapacityError):
        bank.write(latent(rng), 3)


def test_view_with_zero_pos_is_raw_stack(rng):
    bank = MemoryBank.empty(5, 2)
    zs = [latent(rng) for _ in range(3)]
    for r, z in enumerate(zs, 1):
        bank.write(z, r)
    view = bank.view_with_pos()
    assert view.shape[0] == 3
    assert np.array_equal(view.data, np.stack([z.data for z in zs]))


def test_view_adds_pos_row_at_every_token(rng):
    pos = rng.normal(size=(4, 2))
    bank = MemoryBank(pos_table=nc.Tensor(pos))
    z = latent(rng)
    bank.write(z, 1)
    np.testing.assert_array_equal(bank.view_with_pos().data[0], z.data + pos[0])
    # stored entry untouched
    assert np.array_equal(bank.entries[0].latent.data, z.data)


def test_drift_sequence_examples(rng):
    bank = MemoryBank.empty(4, 2)
    z = latent(rng)
    bank.write(z, 1)
    assert not bank.drift_sequence().data.any()
    bank.write(z, 2)
    assert not bank.drift_sequence().data.any()

    bank = MemoryBank.empty(4, 2)
    c = np.array([0.5, -2.0])
    bank.write(z, 1)
    bank.write(nc.Tensor(z.data + c), 2)
    d = bank.drift_sequence().data
    assert not d[0].any()
    np.testing.assert_allclose(d[1], np.broadcast_to(c, z.shape), atol=1e-15)


def test_reference_fallback_and_clear(rng):
    bank = MemoryBank.empty(4, 2)
    zp = latent(rng)
    assert bank.reference(zp) is zp
    z1, z2 = latent(rng), latent(rng)
    bank.write(z1, 1)
    bank.write(z2, 2)
    assert bank.reference(zp) is z2
    bank.clear()
    assert len(bank) == 0
    assert bank.reference(zp) is zp


def test_clear_keeps_pos_table(rng):
    pos = nc.Tensor(rng.normal(size=(3, 2)))
    bank = MemoryBank(pos_table=pos)
    for state in range(3):
        for r in range(1, state + 1):
            bank.write(latent(rng), r)
        bank.clear()
        assert len(bank) == 0
        assert bank.pos_table is pos


def test_empty_bank_errors():
    bank = MemoryBank.empty(3, 2)
    with pytest.raises(EmptyMemoryError):
        bank.view_with_pos()
    with pytest.raises(EmptyMemoryError):
        bank.drift_sequence()


@pytest.mark.parametrize("n", range(1, 9))
def test_drift_rows_equal_entries_for_all_sizes(n, rng):
    bank = MemoryBank.empty(8, 3)
    for r in range(1, n + 1):
        bank.write(latent(rng, 2, 3), r)
    assert bank.drift_sequence().shape[0] == n


def test_access_log_records_reads(rng):
    bank = MemoryBank.empty(4, 2)
    bank.write(latent(rng), 1)
    bank.write(latent(rng), 2)
    bank.current_step = 3
    bank.view_with_pos()
    bank.reference(latent(rng))
    assert bank.reads_at(3) == {1, 2}
