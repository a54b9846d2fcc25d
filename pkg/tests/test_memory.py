import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partreid.dataio import SampleRecord
from partreid.memory import MemoryBank


def test_init_shape_and_flags():
    bank = MemoryBank(np.repeat(np.arange(10), 10), 12, 64)
    assert bank.V.shape == (100, 12, 64)
    assert not bank.initialized.any()


def test_ids_follow_manifest():
    recs = [SampleRecord(f"s{i}", f"id{i % 3}", "c0", "train", "") for i in range(7)]
    bank = MemoryBank.from_records(recs, 2, 4)
    assert bank.ids.tolist() == [r.identity for r in recs]


def test_empty_manifest_rejected():
    with pytest.raises(ValueError):
        MemoryBank([], 2, 4)


def test_first_write_stores_normalized_h():
    bank = MemoryBank([0], 1, 2)
    pre = bank.update(0, 0, [3.0, 4.0])
    np.testing.assert_array_equal(pre, [3.0, 4.0])
    np.testing.assert_allclose(bank.V[0, 0], [0.6, 0.8], atol=1e-15)


def test_half_blend_example():
    bank = MemoryBank([0], 1, 2, delta=0.5)
    bank.update(0, 0, [1.0, 0.0])
    pre = bank.update(0, 0, [0.0, 1.0])
    np.testing.assert_array_equal(pre, [0.5, 0.5])
    np.testing.assert_allclose(bank.V[0, 0], [0.7071067811865476] * 2, atol=1e-15)


def test_delta_endpoints():
    bank = MemoryBank([0], 1, 2)
    bank.update(0, 0, [1.0, 0.0])
    bank.update(0, 0, [0.0, 5.0], delta=1.0)
    np.testing.assert_array_equal(bank.V[0, 0], [1.0, 0.0])
    bank.update(0, 0, [0.0, 5.0], delta=0.0)
    np.testing.assert_array_equal(bank.V[0, 0], [0.0, 1.0])


@pytest.mark.parametrize("i, p", [(1, 0), (-1, 0), (0, 2)])
def test_index_out_of_range(i, p):
    with pytest.raises(IndexError):
        MemoryBank([0], 2, 3).update(i, p, np.ones(3))


def test_bad_delta_and_vector_rejected():
    bank = MemoryBank([0], 1, 2)
    with pytest.raises(ValueError):
        bank.update(0, 0, [1.0, 0.0], delta=1.5)
    with pytest.raises(ValueError):
        bank.update(0, 0, [np.nan, 0.0])
    with pytest.raises(ValueError):
        MemoryBank([0], 1, 2, delta=-0.1)


def test_centers_two_point_mean():
    bank = MemoryBank(["a", "a"], 1, 2, normalize=False)
    bank.update(0, 0, [1.0, 0.0])
    bank.update(1, 0, [0.0, 1.0])
    c = bank.class_centers()
    np.testing.assert_array_equal(c.centers[0, 0], [0.5, 0.5])


def test_single_slot_center_equals_slot():
    bank = MemoryBank(["a", "b"], 1, 2)
    bank.update(0, 0, [0.0, 2.0])
    bank.update(1, 0, [1.0, 0.0])
    c = bank.class_centers()
    np.testing.assert_array_equal(c.centers[c.index_of(["a"])[0], 0], bank.V[0, 0])


def test_center_counts_match_manifest(rng):
    ids = ["a"] * 3 + ["b"] * 5
    bank = MemoryBank(ids, 2, 3)
    bank.update_many(np.arange(8), rng.normal(size=(8, 2, 3)))
    c = bank.class_centers()
    assert c.labels.tolist() == ["a", "b"] and c.counts.tolist() == [3, 5]


def test_identity_without_slots_is_excluded(rng):
    bank = MemoryBank(["a", "b"], 2, 3)
    bank.update(0, 0, rng.normal(size=3))
    bank.update(0, 1, rng.normal(size=3))
    bank.update(1, 0, rng.normal(size=3))  # "b" has no slot for part 1
    c = bank.class_centers()
    assert c.labels.tolist() == ["a"]
    assert c.index_of(["b"]).tolist() == [-1]


def test_similarity_examples():
    bank = MemoryBank([0, 1, 2], 1, 2)
    bank.update(0, 0, [1.0, 0.0])
    bank.update(1, 0, [0.0, 1.0])
    s1 = bank.similarity_scores(np.array([1.0, 0.0]), 0, 1.0)
    assert s1[0] == 1.0 and s1[1] == 0.0 and np.isnan(s1[2])
    s01 = bank.similarity_scores(np.array([0.3, 0.7]), 0, 0.1)
    np.testing.assert_allclose(s01[:2], 10 * bank.similarity_scores(np.array([0.3, 0.7]), 0, 1.0)[:2], rtol=1e-15)


@pytest.mark.parametrize("beta", [0.0, -0.5, 1.5])
def test_similarity_rejects_bad_beta(beta):
    with pytest.raises(ValueError):
        MemoryBank([0], 1, 2).similarity_scores(np.zeros(2), 0, beta)


@settings(max_examples=25, deadline=None)
@given(delta=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_constant_target_residual_shrinks_by_delta(delta, seed):
    rng = np.random.default_rng(seed)
    bank = MemoryBank([0], 1, 4, delta=delta, normalize=False)
    bank.update(0, 0, rng.normal(size=4))
    h = rng.normal(size=4)
    prev = np.linalg.norm(bank.V[0, 0] - h)
    for _ in range(10):
        cur = np.linalg.norm(bank.update(0, 0, h) - h)
        np.testing.assert_allclose(cur, delta * prev, rtol=1e-9, atol=1e-15)
        prev = cur


def test_update_many_matches_sequential(rng):
    a, b = MemoryBank(np.arange(6) % 2, 3, 4), MemoryBank(np.arange(6) % 2, 3, 4)
    for step in range(3):
        idx = rng.choice(6, size=4, replace=False)
        h = rng.normal(size=(4, 3, 4))
        a.update_many(idx, h)
        for row, i in enumerate(idx):
            for p in range(3):
                b.update(i, p, h[row, p])
    np.testing.assert_allclose(a.V, b.V, rtol=0, atol=1e-15)
    assert (a.initialized == b.initialized).all()


def test_update_many_rejects_repeats():
    with pytest.raises(ValueError):
        MemoryBank([0, 1], 1, 2).update_many([0, 0], np.ones((2, 1, 2)))


def test_slot_count_and_ids_are_fixed(rng):
    bank = MemoryBank([5, 6, 5], 1, 2)
    ids = bank.ids.copy()
    for _ in range(20):
        bank.update(int(rng.integers(3)), 0, rng.normal(size=2))
    assert bank.size == 3 and (bank.ids == ids).all()
    with pytest.raises(ValueError):
        bank.ids[0] = 9
