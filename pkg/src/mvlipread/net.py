"""Differentiable layers with explicit forward and backward passes.

Sequences are batched as ``(B, T, D)`` arrays with zero padding after each
utterance's last valid frame. ``lengths`` gives the valid frame count per
utterance and everything downstream of it (deltas, recurrences, losses)
treats padded frames as absent.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ndcore
from .errors import InvalidArgument, NumericFailure
from .ndcore import relu, sigmoid


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class SequenceBatch:
    x: np.ndarray  # (B, T, D)
    lengths: np.ndarray  # (B,)

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.x.ndim != 3 or self.x.shape[0] != self.lengths.shape[0]:
            raise InvalidArgument(
                f"batch of shape {self.x.shape} does not match {self.lengths.shape[0]} lengths"
            )
        if np.any(self.lengths < 1) or np.any(self.lengths > self.x.shape[1]):
            raise InvalidArgument(f"lengths {self.lengths.tolist()} out of range")

    @property
    def mask(self):
        return np.arange(self.x.shape[1])[None, :] < self.lengths[:, None]

    @property
    def size(self):
        return self.x.shape[0]

    @classmethod
    def from_sequences(cls, seqs, dtype=None):
        """Pad a list of ``(T_i, D)`` arrays to a common length."""
        if not seqs:
            raise InvalidArgument("cannot batch an empty list of sequences")
        dtype = dtype or seqs[0].dtype
        lengths = np.array([len(s) for s in seqs])
        dim = seqs[0].shape[1]
        x = np.zeros((len(seqs), lengths.max(), dim), dtype=dtype)
        for k, s in enumerate(seqs):
            if s.shape[1] != dim:
                raise InvalidArgument(f"sequence {k} has dim {s.shape[1]}, expected {dim}")
            x[k, : len(s)] = s
        return cls(x, lengths)


def _masked(x, mask):
    return np.where(mask[..., None], x, 0).astype(x.dtype, copy=False)


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------


@dataclass
class DenseLayer:
    W: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "linear"):
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise InvalidArgument(f"dense shapes W{self.W.shape} b{self.b.shape} do not conform")


def dense_forward(layer, x):
    if x.shape[-1] != layer.W.shape[0]:
        raise InvalidArgument(f"dense input dim {x.shape[-1]} != {layer.W.shape[0]}")
    pre = x @ layer.W + layer.b
    y = relu(pre) if layer.activation == "relu" else pre
    return ndcore.check_finite("dense layer", y)


def dense_backward(layer, x, dy, y=None):
    """Return ``(dx, dW, db)``; ``y`` is the cached forward output if available."""
    if x.shape[-1] != layer.W.shape[0] or dy.shape[-1] != layer.W.shape[1]:
        raise InvalidArgument("dense_backward shape mismatch")
    if layer.activation == "relu":
        if y is None:
            y = dense_forward(layer, x)
        dy = dy * (y > 0)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ layer.W.T
    return dx, dW, db


# --------------------------------------------------------------------------
# delta / delta-delta
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaConfig:
    window: int = 2
    edge_policy: str = "replicate"

    def __post_init__(self):
        if self.window < 1:
            raise InvalidArgument("delta window must be >= 1")
        if self.edge_policy != "replicate":
            raise InvalidArgument(f"unsupported edge policy {self.edge_policy!r}")


@lru_cache(maxsize=512)
def delta_matrix(length, window=2):
    """``(length, length)`` regression matrix with edge frames replicated.

    ``delta = M @ c`` computes sum_k k (c[t+k] - c[t-k]) / (2 sum_k k^2) for
    k = 1..window, clamping indices to the valid range.
    """
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    m = np.zeros((length, length))
    for t in range(length):
        for k in range(1, window + 1):
            m[t, min(t + k, length - 1)] += k / denom
            m[t, max(t - k, 0)] -= k / denom
    m.setflags(write=False)
    return m


def _batch_delta_matrix(lengths, T, window, dtype):
    out = np.zeros((len(lengths), T, T), dtype=dtype)
    for k, L in enumerate(lengths):
        out[k, :L, :L] = delta_matrix(int(L), window)
    return out


def _as_batch(seq, lengths):
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    if lengths is None:
        lengths = np.full(seq.shape[0], seq.shape[1])
    return single, seq, np.asarray(lengths)


def delta_features(seq, cfg=DeltaConfig(), lengths=None):
    """Append first and second temporal regression deltas to every frame.

    Accepts a single ``(T, D)`` sequence or a padded ``(B, T, D)`` batch and
    returns ``(..., T, 3D)`` laid out as ``[c, delta, delta-delta]``. Padded
    frames come back as zeros.
    """
    single, seq, lengths = _as_batch(seq, lengths)
    B, T, D = seq.shape
    if T < 1:
        raise InvalidArgument("delta_features needs at least one frame")
    mask = np.arange(T)[None, :] < lengths[:, None]
    c = _masked(seq, mask)
    M = _batch_delta_matrix(lengths, T, cfg.window, seq.dtype)
    d1 = M @ c
    d2 = M @ d1
    out = np.concatenate([c, d1, d2], axis=-1)
    return out[0] if single else out


def delta_backward(d_out, cfg=DeltaConfig(), lengths=None):
    """Transpose of :func:`delta_features`, mapping ``(..., T, 3D)`` to ``(..., T, D)``."""
    single, d_out, lengths = _as_batch(d_out, lengths)
    B, T, D3 = d_out.shape
    D = D3 // 3
    mask = np.arange(T)[None, :] < lengths[:, None]
    Mt = np.swapaxes(_batch_delta_matrix(lengths, T, cfg.window, d_out.dtype), 1, 2)
    dc = _masked(d_out[..., :D], mask) + Mt @ (d_out[..., D : 2 * D] + Mt @ d_out[..., 2 * D :])
    return dc[0] if single else dc


# --------------------------------------------------------------------------
# LSTM / BLSTM
# --------------------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


@dataclass
class LstmParams:
    """Fused gate weights, column blocks ordered input, forget, output, candidate."""

    Wx: np.ndarray  # (D, 4H)
    Wh: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        H = self.Wh.shape[0]
        if self.Wh.shape != (H, 4 * H) or self.Wx.shape[1] != 4 * H or self.b.shape != (4 * H,):
            raise InvalidArgument(
                f"inconsistent LSTM shapes Wx{self.Wx.shape} Wh{self.Wh.shape} b{self.b.shape}"
            )

    @property
    def hidden_size(self):
        return self.Wh.shape[0]

    @property
    def input_size(self):
        return self.Wx.shape[0]

    def gate(self, name):
        """Views ``(W_input_to_hidden, W_hidden_to_hidden, bias)`` for one gate."""
        H = self.hidden_size
        k = GATES.index(name)
        sl = slice(k * H, (k + 1) * H)
        return self.Wx[:, sl], self.Wh[:, sl], self.b[sl]

    def arrays(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}


def init_lstm(input_size, hidden_size, rng, dtype=np.float32, forget_bias=1.0):
    H = hidden_size
    Wx = np.concatenate([ndcore.glorot_init(input_size, H, rng, dtype) for _ in GATES], axis=1)
    Wh = np.concatenate([ndcore.glorot_init(H, H, rng, dtype) for _ in GATES], axis=1)
    b = np.zeros(4 * H, dtype=dtype)
    b[H : 2 * H] = forget_bias
    return LstmParams(Wx, Wh, b)


def _first_bad_step(arr):
    bad = ~np.isfinite(arr).all(axis=tuple(a for a in range(arr.ndim) if a != 1))
    return int(np.argmax(bad))


def lstm_forward(p, x, mask, where="lstm"):
    """Run one direction over a left-aligned padded batch.

    State is carried unchanged through padded steps and padded outputs are
    zero, which is equivalent to stopping at each utterance's last frame.
    """
    B, T, D = x.shape
    if D != p.input_size:
        raise InvalidArgument(f"{where}: input dim {D} != {p.input_size}")
    H = p.hidden_size
    xw = x @ p.Wx + p.b
    hs = np.zeros((B, T + 1, H), dtype=x.dtype)
    cs = np.zeros((B, T + 1, H), dtype=x.dtype)
    acts = np.empty((B, T, 4 * H), dtype=x.dtype)
    tcs = np.empty((B, T, H), dtype=x.dtype)
    h = hs[:, 0]
    c = cs[:, 0]
    for t in range(T):
        a = xw[:, t] + h @ p.Wh
        ifo = sigmoid(a[:, : 3 * H])
        g = np.tanh(a[:, 3 * H :])
        cn = ifo[:, H : 2 * H] * c + ifo[:, :H] * g
        tc = np.tanh(cn)
        hn = ifo[:, 2 * H : 3 * H] * tc
        m = mask[:, t, None]
        c = np.where(m, cn, c)
        h = np.where(m, hn, h)
        acts[:, t, : 3 * H] = ifo
        acts[:, t, 3 * H :] = g
        tcs[:, t] = tc
        cs[:, t + 1] = c
        hs[:, t + 1] = h
    if not np.all(np.isfinite(hs)):
        raise NumericFailure(where, timestep=_first_bad_step(hs[:, 1:]))
    out = _masked(hs[:, 1:], mask)
    return out, (x, mask, acts, tcs, hs, cs)


def lstm_backward(p, cache, dout):
    x, mask, acts, tcs, hs, cs = cache
    B, T, D = x.shape
    H = p.hidden_size
    if dout.shape != (B, T, H):
        raise InvalidArgument(f"lstm_backward: dout {dout.shape} != {(B, T, H)}")
    dout = _masked(dout, mask)
    da_all = np.zeros((B, T, 4 * H), dtype=x.dtype)
    dh_next = np.zeros((B, H), dtype=x.dtype)
    dc_next = np.zeros((B, H), dtype=x.dtype)
    WhT = p.Wh.T
    for t in range(T - 1, -1, -1):
        m = mask[:, t, None]
        i = acts[:, t, :H]
        f = acts[:, t, H : 2 * H]
        o = acts[:, t, 2 * H : 3 * H]
        g = acts[:, t, 3 * H :]
        tc = tcs[:, t]
        dh = dout[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        da = np.concatenate(
            [
                dc * g * i * (1 - i),
                dc * cs[:, t] * f * (1 - f),
                dh * tc * o * (1 - o),
                dc * i * (1 - g * g),
            ],
            axis=1,
        )
        da = np.where(m, da, 0)
        da_all[:, t] = da
        dh_next = np.where(m, da @ WhT, dh)
        dc_next = np.where(m, dc * f, dc_next)
    da2 = da_all.reshape(-1, 4 * H)
    grads = LstmParams(
        x.reshape(-1, D).T @ da2,
        hs[:, :-1].reshape(-1, H).T @ da2,
        da2.sum(axis=0),
    )
    dx = da_all @ p.Wx.T
    return dx, grads


def reverse_index(lengths, T):
    """Per-utterance time reversal of the valid prefix; padding stays in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _take_time(x, idx):
    return np.take_along_axis(x, idx[..., None], axis=1)


@dataclass
class BlstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def hidden_size(self):
        return self.fwd.hidden_size

    @property
    def input_size(self):
        return self.fwd.input_size


def init_blstm(input_size, hidden_size, rng, dtype=np.float32, forget_bias=1.0):
    return BlstmParams(
        init_lstm(input_size, hidden_size, rng, dtype, forget_bias),
        init_lstm(input_size, hidden_size, rng, dtype, forget_bias),
    )


def blstm_forward(params, x, lengths, where="blstm"):
    """Return per-frame ``[forward_t ; backward_t]`` states, shape ``(B, T, 2H)``."""
    B, T, _ = x.shape
    mask = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    idx = reverse_index(lengths, T)
    out_f, cache_f = lstm_forward(params.fwd, x, mask, where + "/fwd")
    out_r, cache_b = lstm_forward(params.bwd, _take_time(x, idx), mask, where + "/bwd")
    out = np.concatenate([out_f, _take_time(out_r, idx)], axis=-1)
    return out, (cache_f, cache_b, idx)


def blstm_backward(params, cache, dout):
    """Return ``(dx, grads_fwd, grads_bwd)``."""
    cache_f, cache_b, idx = cache
    H = params.hidden_size
    if dout.shape[-1] != 2 * H:
        raise InvalidArgument(f"blstm_backward: dout dim {dout.shape[-1]} != {2 * H}")
    dx_f, g_f = lstm_backward(params.fwd, cache_f, dout[..., :H])
    dx_r, g_b = lstm_backward(params.bwd, cache_b, _take_time(dout[..., H:], idx))
    return dx_f + _take_time(dx_r, idx), g_f, g_b


# --------------------------------------------------------------------------
# softmax head
# --------------------------------------------------------------------------


def init_head(input_size, num_classes, rng, dtype=np.float32):
    return DenseLayer(
        ndcore.glorot_init(input_size, num_classes, rng, dtype),
        np.zeros(num_classes, dtype=dtype),
        "linear",
    )


def head_logits(head, x):
    return dense_forward(head, x)


def softmax_head(head, x):
    return ndcore.softmax(head_logits(head, x))
