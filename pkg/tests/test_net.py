import numpy as np
import pytest

from mvlipread import gradcheck, net, ndcore
from mvlipread.errors import InvalidArgument, NumericFailure
from mvlipread.net import DeltaConfig, SequenceBatch


def delta_oracle(c, window=2):
    """Direct loop form of the regression with replicated edges."""
    T = len(c)
    denom = 2 * sum(th * th for th in range(1, window + 1))
    out = np.zeros_like(c, dtype=np.float64)
    for t in range(T):
        for th in range(1, window + 1):
            out[t] += th * (c[min(t + th, T - 1)] - c[max(t - th, 0)])
    return out / denom


# --------------------------------------------------------------------------
# batches and dense layers
# --------------------------------------------------------------------------


def test_sequence_batch_padding_and_mask():
    b = SequenceBatch.from_sequences([np.ones((3, 2)), 2 * np.ones((1, 2))], np.float64)
    assert b.x.shape == (2, 3, 2)
    assert b.mask.sum(axis=1).tolist() == [3, 1]
    assert np.all(b.x[1, 1:] == 0)
    with pytest.raises(InvalidArgument):
        SequenceBatch(np.zeros((2, 3, 1)), [4, 1])
    with pytest.raises(InvalidArgument):
        SequenceBatch.from_sequences([])


def test_dense_identity_relu():
    layer = net.DenseLayer(np.eye(2), np.zeros(2), "relu")
    assert np.array_equal(net.dense_forward(layer, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_dense_zero_upstream_gives_zero_grads(rng):
    layer = net.DenseLayer(rng.normal(size=(3, 2)), rng.normal(size=2), "linear")
    x = rng.normal(size=(4, 3))
    dx, dW, db = net.dense_backward(layer, x, np.zeros((4, 2)))
    assert not dx.any() and not dW.any() and not db.any()


def test_dense_shape_mismatch(rng):
    layer = net.DenseLayer(rng.normal(size=(3, 2)), np.zeros(2), "relu")
    with pytest.raises(InvalidArgument):
        net.dense_forward(layer, np.ones((1, 4)))
    with pytest.raises(InvalidArgument):
        net.DenseLayer(np.ones((3, 2)), np.zeros(3), "relu")


def test_dense_gradcheck_tight():
    worst = max(gradcheck.check_dense(ndcore.make_rng(5, k)) for k in range(20))
    assert worst < 1e-6


# --------------------------------------------------------------------------
# delta features
# --------------------------------------------------------------------------


def test_delta_constant_sequence():
    out = net.delta_features(np.full((6, 2), 3.5))
    assert out.shape == (6, 6)
    assert np.array_equal(out[:, :2], np.full((6, 2), 3.5))
    assert np.all(np.abs(out[:, 2:]) <= 1e-12)


def test_delta_ramp_interior():
    a = 0.7
    c = a * np.arange(9, dtype=np.float64)[:, None]
    out = net.delta_features(c)
    interior = slice(2, 7)
    assert np.allclose(out[interior, 1], a, atol=1e-12, rtol=0)
    # delta-delta needs the delta itself to be constant over its own window
    assert np.allclose(out[4:5, 2], 0.0, atol=1e-12)


@pytest.mark.parametrize("T", [1, 2, 3, 4, 5, 9])
@pytest.mark.parametrize("window", [1, 2, 3])
def test_delta_matches_loop_oracle(T, window):
    c = ndcore.make_rng(T, window).normal(size=(T, 3))
    cfg = DeltaConfig(window)
    out = net.delta_features(c, cfg)
    d = delta_oracle(c, window)
    dd = delta_oracle(d, window)
    assert np.allclose(out, np.concatenate([c, d, dd], axis=1), atol=1e-12, rtol=0)


def test_delta_batch_respects_lengths(rng):
    x = rng.normal(size=(3, 7, 2))
    lengths = np.array([7, 4, 1])
    out = net.delta_features(x, DeltaConfig(), lengths)
    for k, L in enumerate(lengths):
        single = net.delta_features(x[k, :L], DeltaConfig())
        assert np.allclose(out[k, :L], single, atol=1e-12)
        assert not out[k, L:].any()


def test_delta_is_linear(rng):
    x = rng.normal(size=(2, 6, 3))
    y = rng.normal(size=(2, 6, 3))
    lengths = [6, 4]
    a, b = 1.7, -0.3
    lhs = net.delta_features(a * x + b * y, DeltaConfig(), lengths)
    rhs = a * net.delta_features(x, DeltaConfig(), lengths) + b * net.delta_features(y, DeltaConfig(), lengths)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_delta_backward_is_transpose(rng):
    # <f(x), r> == <x, f^T(r)> for the linear map
    x = rng.normal(size=(2, 7, 3))
    r = rng.normal(size=(2, 7, 9))
    lengths = [7, 5]
    mask = (np.arange(7)[None] < np.array(lengths)[:, None])[..., None]
    x = x * mask
    lhs = np.sum(net.delta_features(x, DeltaConfig(), lengths) * r)
    rhs = np.sum(x * net.delta_backward(r, DeltaConfig(), lengths))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_delta_backward_finite_difference():
    rng = ndcore.make_rng(11)
    c = rng.normal(size=(7, 3))
    r = rng.normal(size=(7, 9))

    def f():
        return float(np.sum(net.delta_features(c) * r))

    num = gradcheck.numeric_grad(f, c)
    assert gradcheck.rel_error(net.delta_backward(r), num) < 1e-8


def test_delta_window_must_be_positive():
    with pytest.raises(InvalidArgument):
        DeltaConfig(0)


# --------------------------------------------------------------------------
# LSTM / BLSTM
# --------------------------------------------------------------------------


def _zero_blstm(D, H):
    z = lambda: net.LstmParams(np.zeros((D, 4 * H)), np.zeros((H, 4 * H)), np.zeros(4 * H))  # noqa: E731
    return net.BlstmParams(z(), z())


def test_blstm_zero_params_zero_states(rng):
    out, _ = net.blstm_forward(_zero_blstm(3, 2), rng.normal(size=(2, 5, 3)), [5, 3])
    assert not out.any()


def test_lstm_gate_layout_and_forget_bias(rng):
    p = net.init_lstm(3, 4, rng, np.float64, forget_bias=1.0)
    assert p.Wx.shape == (3, 16) and p.Wh.shape == (4, 16) and p.b.shape == (16,)
    assert np.all(p.gate("forget")[2] == 1.0)
    for name in ("input", "output", "candidate"):
        assert not p.gate(name)[2].any()
    assert len(p.arrays()) == 3


def test_blstm_palindrome_symmetry(rng):
    D, H, T = 3, 2, 5
    lp = net.init_lstm(D, H, rng, np.float64)
    lp.b[...] = rng.normal(size=lp.b.shape)
    tied = net.BlstmParams(lp, lp)
    half = rng.normal(size=(3, D))
    pal = np.concatenate([half, half[-2::-1]])[None]
    assert np.array_equal(pal[0], pal[0, ::-1])
    out, _ = net.blstm_forward(tied, pal, [T])
    fwd, bwd = out[0, :, :H], out[0, :, H:]
    assert np.allclose(fwd[::-1], bwd, atol=1e-14)


def test_blstm_causality_probe(rng):
    D, H, T = 2, 3, 6
    params = net.init_blstm(D, H, rng, np.float64)
    x = rng.normal(size=(1, T, D))
    base, _ = net.blstm_forward(params, x, [T])
    for s in range(T):
        xp = x.copy()
        xp[0, s] += 1.0
        out, _ = net.blstm_forward(params, xp, [T])
        changed = np.abs(out - base)[0] > 0
        # forward states before s and backward states after s are untouched
        assert not changed[:s, :H].any()
        assert not changed[s + 1 :, H:].any()
        assert changed[s, :H].any() and changed[s, H:].any()


def test_blstm_padding_equivalent_to_unpadded(rng):
    params = net.init_blstm(3, 2, rng, np.float64)
    x = rng.normal(size=(2, 6, 3))
    out, _ = net.blstm_forward(params, x, [6, 4])
    alone, _ = net.blstm_forward(params, x[1:, :4], [4])
    assert np.allclose(out[1, :4], alone[0], atol=1e-14)
    assert not out[1, 4:].any()


def test_blstm_padded_values_have_no_influence(rng):
    params = net.init_blstm(3, 2, rng, np.float64)
    x = rng.normal(size=(2, 6, 3))
    dout = rng.normal(size=(2, 6, 4))
    lengths = [6, 3]
    out1, c1 = net.blstm_forward(params, x, lengths)
    x2 = x.copy()
    x2[1, 3:] = 1e3
    out2, c2 = net.blstm_forward(params, x2, lengths)
    assert np.array_equal(out1, out2)
    g1 = net.blstm_backward(params, c1, dout)
    g2 = net.blstm_backward(params, c2, dout)
    flat = lambda g: [g[0], *g[1].arrays().values(), *g[2].arrays().values()]  # noqa: E731
    for a, b in zip(flat(g1), flat(g2)):
        assert np.array_equal(a, b)
    assert not g1[0][1, 3:].any()


def test_blstm_zero_upstream_zero_grads(rng):
    params = net.init_blstm(3, 2, rng, np.float64)
    out, cache = net.blstm_forward(params, rng.normal(size=(2, 4, 3)), [4, 2])
    dx, gf, gb = net.blstm_backward(params, cache, np.zeros_like(out))
    assert not dx.any()
    assert not any(a.any() for g in (gf, gb) for a in g.arrays().values())


def test_blstm_gradcheck_tiny_fixed_shape():
    rng = ndcore.make_rng(3)
    D, H, T = 3, 2, 4
    params = net.init_blstm(D, H, rng, np.float64)
    x = rng.normal(size=(1, T, D))
    r = rng.normal(size=(1, T, 2 * H))

    def f():
        return float(np.sum(net.blstm_forward(params, x, [T])[0] * r))

    _, cache = net.blstm_forward(params, x, [T])
    dx, gf, gb = net.blstm_backward(params, cache, r)
    errs = [gradcheck.rel_error(dx, gradcheck.numeric_grad(f, x))]
    for p, g in ((params.fwd, gf), (params.bwd, gb)):
        errs += [gradcheck.rel_error(g.arrays()[k], gradcheck.numeric_grad(f, p.arrays()[k])) for k in p.arrays()]
    assert max(errs) < 1e-5


def test_lstm_nonfinite_reports_timestep(rng):
    p = net.init_lstm(2, 2, rng, np.float64)
    x = rng.normal(size=(1, 4, 2))
    x[0, 2] = np.nan
    with pytest.raises(NumericFailure) as exc:
        net.lstm_forward(p, x, np.ones((1, 4), bool))
    assert exc.value.timestep == 2


def test_reverse_index():
    idx = net.reverse_index([4, 2], 4)
    assert idx.tolist() == [[3, 2, 1, 0], [1, 0, 2, 3]]


# --------------------------------------------------------------------------
# softmax head
# --------------------------------------------------------------------------


def test_head_zero_weights_uniform():
    head = net.DenseLayer(np.zeros((5, 10)), np.zeros(10), "linear")
    p = net.softmax_head(head, np.ones((2, 3, 5)))
    assert np.allclose(p, 0.1)


def test_head_large_logit_stable():
    head = net.DenseLayer(np.eye(3), np.zeros(3), "linear")
    p = net.softmax_head(head, np.array([[1e4, 0.0, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)


def test_cross_entropy_gradient_identity():
    from mvlipread.train import frame_cross_entropy

    rng = ndcore.make_rng(8)
    z = rng.normal(size=(5, 10))
    _, dz = frame_cross_entropy(z, 3)
    onehot = np.eye(10)[3]
    expected = (ndcore.softmax(z) - onehot) / 5
    assert gradcheck.rel_error(dz, expected) < 1e-8

    # extended precision keeps finite-difference round-off below the tolerance
    zl = z.astype(np.longdouble)

    def f():
        return frame_cross_entropy(zl, 3)[0]

    assert gradcheck.rel_error(dz, gradcheck.numeric_grad(f, zl)) < 1e-8


# --------------------------------------------------------------------------
# randomized gradient-check suite
# --------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["dense", "delta", "lstm", "blstm", "softmax_head"])
def test_layer_gradchecks(name):
    (res,) = gradcheck.run_suite(trials=20, seed=1, names=[name])
    assert res.passed(1e-5), res
