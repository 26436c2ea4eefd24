"""Dense numeric primitives: precision handling, seeded RNG streams,
initialisers and activations.

Matrices are plain ``numpy.ndarray`` values. Weight matrices are stored as
``(fan_in, fan_out)`` so a layer computes ``x @ W + b`` on row-major batches.
"""

import contextlib

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InvalidArgument, NumericFailure

FLOAT64 = np.float64
FLOAT32 = np.float32

# Flipped on by the test-suite; checks every layer op for non-finite output.
CHECK_FINITE = False


def as_dtype(precision):
    """Map ``32``/``64``/``"float32"``/``"float64"``/dtype to a numpy dtype."""
    if precision in (32, "32", "float32", "f32", np.float32):
        return np.dtype(np.float32)
    if precision in (64, "64", "float64", "f64", np.float64):
        return np.dtype(np.float64)
    raise InvalidArgument(f"unsupported precision {precision!r}")


def make_rng(seed, *stream):
    """Return a Philox-backed generator for ``(seed, *stream)``.

    Philox is counter based and ``SeedSequence`` hashing is fully specified,
    so identical keys give identical draws on every platform. Distinct stream
    keys (view angle, run index, purpose tag) give independent streams.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        if isinstance(s, str):
            key.extend(s.encode())
        else:
            key.append(int(s))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@contextlib.contextmanager
def deterministic(enabled=True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def check_finite(where, arr, force=False):
    if (CHECK_FINITE or force) and not np.all(np.isfinite(arr)):
        raise NumericFailure(where)
    return arr


def glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(fan_in, fan_out, rng, dtype=np.float32):
    """Uniform ``[-L, L]`` weights with ``L = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgument(f"glorot_init needs positive fans, got ({fan_in}, {fan_out})")
    dtype = np.dtype(dtype)
    bound = glorot_bound(fan_in, fan_out)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    # rounding to float32 may step just past the bound
    lim = dtype.type(bound)
    if float(lim) > bound:
        lim = np.nextafter(lim, dtype.type(0))
    return np.clip(w, -lim, lim)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (x > 0).astype(x.dtype)


def identity(x):
    return x


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(v, axis=-1):
    v = np.asarray(v)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise InvalidArgument(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def add_bias(x, b):
    x = np.asarray(x)
    b = np.asarray(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise InvalidArgument(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return x + b


def elementwise(op, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    return op(a, b)
