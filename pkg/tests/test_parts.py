import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partreid import autodiff as ad
from partreid.features import FeatureMap, duplicate_branches
from partreid.parts import HORIZONTAL, VERTICAL, assemble, part_features, partition, pool_parts, stripe_bounds


def fm(values):
    return FeatureMap(ad.Tensor(np.asarray(values, dtype=np.float64)))


def test_twelve_rows_six_parts():
    assert [hi - lo for lo, hi in stripe_bounds(12, 6)] == [2] * 6


def test_remainder_goes_to_last_stripe():
    assert [hi - lo for lo, hi in stripe_bounds(7, 6)] == [1, 1, 1, 1, 1, 2]


def test_single_stripe_is_whole_map(rng):
    m = rng.normal(size=(2, 5, 4, 3))
    (only,) = partition(fm(m), 1)
    assert only.values.tobytes() == m.tobytes()


def test_too_many_parts_rejected():
    with pytest.raises(ValueError):
        stripe_bounds(5, 6)
    with pytest.raises(ValueError):
        partition(fm(np.zeros((1, 5, 5, 2))), 6)


def test_pool_ones():
    (v,) = pool_parts([ad.Tensor(np.ones((1, 2, 4, 3)))])
    np.testing.assert_array_equal(v.values, [[1.0, 1.0, 1.0]])


def test_pool_zero_two_pattern():
    s = np.zeros((1, 2, 2, 1))
    s[0, 0] = 2.0
    (v,) = pool_parts([ad.Tensor(s)])
    assert v.values[0, 0] == 1.0


def test_constant_map_gives_equal_parts():
    parts = pool_parts(partition(fm(np.full((1, 7, 5, 3), 0.25)), 4))
    for p in parts:
        np.testing.assert_array_equal(p.values, parts[0].values)


def test_twelve_parts_horizontal_first(rng):
    t, t_t = duplicate_branches(fm(rng.normal(size=(2, 12, 12, 4))))
    pfs = part_features(t, t_t, 6, 6)
    assert pfs.parts.shape == (2, 12, 4)
    assert pfs.orientations == (HORIZONTAL,) * 6 + (VERTICAL,) * 6


def test_one_branch_ablation(rng):
    t, t_t = duplicate_branches(fm(rng.normal(size=(1, 12, 12, 4))))
    pfs = part_features(t, t_t, 6, 0)
    assert pfs.num_parts == 6 and pfs.parts.shape == (1, 6, 4)


def test_zero_map_gives_zero_parts():
    t, t_t = duplicate_branches(fm(np.zeros((1, 12, 12, 4))))
    assert np.all(part_features(t, t_t, 6, 6).parts.values == 0.0)


def test_parts_are_unit_normalized(rng):
    t, t_t = duplicate_branches(fm(rng.normal(size=(3, 12, 12, 4))))
    norms = np.linalg.norm(part_features(t, t_t, 6, 6).parts.values, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_count_mismatch_rejected():
    v = [ad.Tensor(np.ones((1, 3)))] * 5
    with pytest.raises(ValueError, match="expected 6"):
        assemble(v, [], 6, 0)


@settings(max_examples=60, deadline=None)
@given(height=st.integers(1, 40), data=st.data())
def test_stripes_tile_the_height(height, data):
    p = data.draw(st.integers(1, height))
    bounds = stripe_bounds(height, p)
    covered = [r for lo, hi in bounds for r in range(lo, hi)]
    assert covered == list(range(height))
    assert all(hi - lo == height // p for lo, hi in bounds[:-1])


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 6), seed=st.integers(0, 1000), data=st.data())
def test_weighted_part_mean_equals_global_mean(h, w, seed, data):
    p = data.draw(st.integers(1, h))
    m = np.random.default_rng(seed).normal(size=(2, h, w, 3))
    parts = pool_parts(partition(fm(m), p))
    heights = [hi - lo for lo, hi in stripe_bounds(h, p)]
    weighted = sum(hgt * v.values for hgt, v in zip(heights, parts)) / h
    np.testing.assert_allclose(weighted, m.mean(axis=(1, 2)), rtol=1e-12, atol=1e-12)


def test_vertical_parts_are_width_stripes_of_t(rng):
    m = rng.normal(size=(2, 6, 9, 3))
    t, t_t = duplicate_branches(fm(m))
    vertical = pool_parts(partition(t_t, 4))
    for (lo, hi), v in zip(stripe_bounds(9, 4), vertical):
        np.testing.assert_allclose(v.values, m[:, :, lo:hi].mean(axis=(1, 2)), rtol=1e-13, atol=1e-15)
