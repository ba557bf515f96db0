import numpy as np
import pytest

from pfeddsu.tensor import Rng, as_tensor, axpy, gaussian_sample, hadamard, l2_norm, scale, stream_id


def test_as_tensor_copies_and_reshapes():
    src = [1, 2, 3, 4, 5, 6]
    t = as_tensor(src, (2, 3))
    assert t.dtype == np.float64 and t.shape == (2, 3)
    t[0, 0] = 9
    assert src[0] == 1


@pytest.mark.parametrize("shape", [(4, 2), (0, 6), (-1, 6)])
def test_as_tensor_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        as_tensor(np.zeros(6), shape)


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        as_tensor([1.0, np.nan])


def test_rng_replays_exactly():
    a = Rng(5, 3).generator().standard_normal(100)
    b = Rng(5, 3).generator().standard_normal(100)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, Rng(5, 4).generator().standard_normal(100))
    assert not np.array_equal(a, Rng(6, 3).generator().standard_normal(100))


def test_child_streams_are_order_independent():
    root = Rng(1)
    first = [root.child("local", t, i).generator().random() for t in range(3) for i in range(3)]
    again = [root.child("local", t, i).generator().random() for t in reversed(range(3)) for i in range(3)]
    assert sorted(first) == sorted(again)
    assert root.child("a", 1, 2) != root.child("a", 2, 1)


def test_stream_id_distinguishes_types_and_large_ints():
    assert stream_id("1") != stream_id(1)
    assert stream_id(2 ** 64 - 1) != stream_id(2 ** 64 - 2)
    assert 0 <= stream_id("x", 3) < 2 ** 64


def test_rng_rejects_out_of_range():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(0, 2 ** 64)


def test_gaussian_sample_moments_and_zero_std():
    x = gaussian_sample(Rng(0), (200_000,), 2.5)
    assert abs(x.mean()) < 0.03 and abs(x.std() - 2.5) < 0.02
    assert not np.any(gaussian_sample(Rng(0), 5, 0.0))
    with pytest.raises(ValueError):
        gaussian_sample(Rng(0), 3, -1.0)


def test_elementwise_helpers():
    x, y = np.array([1.0, -2.0]), np.array([3.0, 4.0])
    assert np.array_equal(axpy(2.0, x, y), [5.0, 0.0])
    assert np.array_equal(hadamard(x, y), [3.0, -8.0])
    assert np.array_equal(scale(x, -1), [-1.0, 2.0])
    assert l2_norm(np.array([3.0, 4.0])) == 5.0
    with pytest.raises(ValueError):
        axpy(1.0, x, np.zeros(3))
    with pytest.raises(ValueError):
        hadamard(x, np.zeros((2, 1)))
