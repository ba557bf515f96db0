import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfeddsu.sparsify import (MaskMatrix, SparseDelta, compute_mask, masked_update,
                              reparameterized_forward_params, retained_count, topk_mask)

SPARSITY = st.sampled_from([0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]) | st.floats(1e-4, 1.0)
# small integer-valued floats force many magnitude ties
VECTORS = arrays(np.float64, st.integers(1, 300),
                 elements=st.integers(-4, 4).map(float) | st.floats(-1e3, 1e3))


def oracle_mask(v, s):
    """Stable sort by descending magnitude; keep the first ceil(S*n)."""
    order = np.argsort(-np.abs(v), kind="stable")
    m = np.zeros(v.size, dtype=bool)
    m[order[:retained_count(v.size, s)]] = True
    return m


def test_retained_count_uses_exact_decimal_ceil():
    assert retained_count(10, 0.7) == 7  # binary float 0.7 * 10 would ceil to 8
    assert retained_count(101, 0.05) == 6
    assert retained_count(1024, 0.01) == 11
    assert retained_count(5, 1e-6) == 1
    assert retained_count(3, 1.0) == 3


@settings(max_examples=150, deadline=None)
@given(VECTORS, SPARSITY)
def test_topk_matches_stable_sort_oracle(v, s):
    m = topk_mask(v, s)
    assert m.sum() == retained_count(v.size, s)
    assert np.array_equal(m, oracle_mask(v, s))


@settings(max_examples=100, deadline=None)
@given(VECTORS, SPARSITY)
def test_topk_dominance_and_low_index_ties(v, s):
    m = topk_mask(v, s)
    mag = np.abs(v)
    if m.all():
        return
    kept_min, dropped_max = mag[m].min(), mag[~m].max()
    assert kept_min >= dropped_max
    if kept_min == dropped_max:  # among tied entries, kept ones come first
        tied = np.flatnonzero(mag == kept_min)
        flags = m[tied]
        assert np.all(flags[:flags.sum()]) and not np.any(flags[flags.sum():])


def test_topk_rejects_bad_sparsity():
    for s in (0.0, -0.1, 1.5, math.nan):
        with pytest.raises(ValueError):
            topk_mask(np.ones(4), s)


def test_compute_mask_dense_prefix():
    layers = [np.arange(10.0), np.arange(20.0), -np.arange(30.0)]
    m = compute_mask(layers, 0.1, dense_prefix=1, step=3)
    assert m.layers[0] is None and m.popcounts() == [None, 2, 3] and m.step == 3
    assert np.array_equal(np.flatnonzero(m.layers[2]), [27, 28, 29])
    assert np.array_equal(np.flatnonzero(m.layers[1]), [18, 19])
    with pytest.raises(ValueError):
        compute_mask(layers, 0.1, dense_prefix=4)


def test_mask_matrix_prefix_invariant():
    with pytest.raises(ValueError):
        MaskMatrix((np.ones(3, bool), None), 0.5, 1)
    dense = MaskMatrix.dense([3, 4])
    assert dense.popcounts() == [None, None]
    assert np.array_equal(dense.layer(1, 4), np.ones(4))


def test_reparameterized_forward_params():
    p = [np.array([1.0, -5.0, 2.0]), np.array([0.5, -0.1, 3.0, 0.0])]
    m = compute_mask(p, 0.5, dense_prefix=1)
    out = reparameterized_forward_params(p, m)
    assert np.array_equal(out[0], p[0]) and out[0] is not p[0]
    assert np.array_equal(out[1], [0.5, 0.0, 3.0, 0.0])
    assert np.array_equal(reparameterized_forward_params(p, None)[1], p[1])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 50, elements=st.floats(-10, 10)),
       arrays(np.float64, 50, elements=st.floats(-10, 10)), SPARSITY)
def test_masked_update_support(final, anchor, s):
    m = compute_mask([final], s)
    d = masked_update([final], [anchor], m)
    assert not np.any(d.flat()[~d.support()])
    np.testing.assert_array_equal(d.flat()[m.layers[0]], (final - anchor)[m.layers[0]])
    assert d.nnz_budget() == retained_count(50, s)
    assert math.isclose(d.norm, float(np.linalg.norm(d.flat())), rel_tol=1e-12, abs_tol=1e-300)


def test_masked_update_shape_errors():
    with pytest.raises(ValueError):
        masked_update([np.zeros(3)], [np.zeros(4)], None)
    with pytest.raises(ValueError):
        masked_update([np.zeros(3)], [np.zeros(3), np.zeros(1)], None)


def test_dense_sparse_delta():
    d = SparseDelta.from_layers([np.array([3.0]), np.array([4.0])], None)
    assert d.norm == 5.0 and d.nnz_budget() == 2
