import numpy as np
import pytest

from mvlipread import ndcore
from mvlipread.errors import InvalidArgument


def test_glorot_bound_closed_form():
    assert ndcore.glorot_bound(3, 3) == pytest.approx(1.0)
    assert ndcore.glorot_bound(1, 1) == pytest.approx(np.sqrt(3))


@pytest.mark.parametrize("fan_in,fan_out", [(3, 3), (1, 1), (7, 2), (500, 20)])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_glorot_within_bound(fan_in, fan_out, dtype):
    W = ndcore.glorot_init(fan_in, fan_out, ndcore.make_rng(0, fan_in, fan_out), dtype)
    L = np.sqrt(6.0 / (fan_in + fan_out))
    assert W.shape == (fan_in, fan_out) and W.dtype == dtype
    assert np.all(np.abs(W.astype(np.float64)) <= L)


def test_glorot_variance():
    # uniform on [-L, L] has variance L^2 / 3 = 2 / (fan_in + fan_out)
    W = ndcore.glorot_init(100, 1000, ndcore.make_rng(1), np.float64)
    target = 2.0 / 1100
    assert abs(W.var() - target) / target < 0.05
    W = ndcore.glorot_init(100, 100, ndcore.make_rng(2), np.float64)
    assert W.size == 10**4
    draws = np.concatenate([ndcore.glorot_init(100, 100, ndcore.make_rng(3, k), np.float64).ravel()
                            for k in range(10)])
    assert abs(draws.var() - 0.01) / 0.01 < 0.05


@pytest.mark.parametrize("bad", [(0, 3), (3, 0), (-1, 2)])
def test_glorot_rejects_zero_fans(bad):
    with pytest.raises(InvalidArgument):
        ndcore.glorot_init(*bad, ndcore.make_rng(0))


def test_rng_reproducible_and_stream_separated():
    a = ndcore.make_rng(7, "x").normal(size=20)
    b = ndcore.make_rng(7, "x").normal(size=20)
    c = ndcore.make_rng(7, "y").normal(size=20)
    d = ndcore.make_rng(8, "x").normal(size=20)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_golden_values():
    # frozen draws guard against silent changes of the generator
    assert ndcore.make_rng(0).integers(0, 2**31, 3).tolist() == [291248084, 30208729, 2013765090]
    assert ndcore.make_rng(42, "a", 3).normal(size=2).tolist() == [-1.1246439171038176, -0.4516171968092611]


def test_relu_and_grad():
    assert np.array_equal(ndcore.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(ndcore.relu_grad(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])
    assert np.array_equal(ndcore.identity(np.array([-1.0, 3.0])), [-1.0, 3.0])


def test_softmax_examples():
    assert np.allclose(ndcore.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    p = ndcore.softmax(np.array([1000.0, 1000.0, 1000.0]))
    assert np.all(np.isfinite(p)) and np.allclose(p, 1 / 3)
    p = ndcore.softmax(np.array([1e4, 0.0, -1e4]))
    assert p[0] == pytest.approx(1.0) and np.all(np.isfinite(p))


def test_softmax_probability_vector(rng):
    for _ in range(50):
        v = rng.normal(scale=30, size=(4, 11))
        p = ndcore.softmax(v)
        assert np.all(p >= 0)
        assert np.all(np.abs(p.sum(axis=-1) - 1) <= 1e-12)
        assert np.allclose(np.log(p + 1e-300), ndcore.log_softmax(v), atol=1e-9)


def test_sigmoid_stable():
    x = np.array([-1000.0, 0.0, 1000.0])
    assert np.allclose(ndcore.sigmoid(x), [0.0, 0.5, 1.0])


def test_matmul_identity_and_hand_product(rng):
    A = rng.normal(size=(4, 3))
    assert np.array_equal(ndcore.matmul(np.eye(4), A), A)
    got = ndcore.matmul(np.array([[1.0, 2, 3], [4, 5, 6]]), np.array([[1.0], [0], [-1]]))
    assert np.array_equal(got, [[-2.0], [-2.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(InvalidArgument):
        ndcore.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_bias_and_elementwise():
    x = np.zeros((2, 3))
    assert np.array_equal(ndcore.add_bias(x, np.array([1.0, 2, 3])), [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(InvalidArgument):
        ndcore.add_bias(x, np.ones(2))
    assert np.array_equal(ndcore.elementwise(np.multiply, np.full((2, 2), 2.0), np.full((2, 2), 3.0)),
                          np.full((2, 2), 6.0))
    with pytest.raises(InvalidArgument):
        ndcore.elementwise(np.add, np.ones((2, 2)), np.ones((3, 2)))


def test_as_dtype():
    assert ndcore.as_dtype(32) == np.float32
    assert ndcore.as_dtype(64) == np.float64
    with pytest.raises(InvalidArgument):
        ndcore.as_dtype(16)


def test_check_finite_raises():
    from mvlipread.errors import NumericFailure

    with pytest.raises(NumericFailure):
        ndcore.check_finite("layer", np.array([1.0, np.nan]), force=True)
    ndcore.check_finite("layer", np.array([1.0, 2.0]), force=True)


def test_deterministic_context_limits_threads():
    from threadpoolctl import threadpool_info

    with ndcore.deterministic(True):
        blas = [i for i in threadpool_info() if i.get("user_api") == "blas"]
        assert all(i["num_threads"] == 1 for i in blas)
    with ndcore.deterministic(False):
        pass


def test_identical_seeds_identical_matrices():
    a = ndcore.glorot_init(20, 30, ndcore.make_rng(99, "w"))
    b = ndcore.glorot_init(20, 30, ndcore.make_rng(99, "w"))
    assert a.tobytes() == b.tobytes()
