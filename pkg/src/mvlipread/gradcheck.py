"""Central-difference gradient checks for every layer and the full chains.

All checks run in float64 on toy shapes with every parameter (biases
included) drawn at random, so no ReLU sits exactly on its kink.
"""

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import ndcore, net, train
from .net import SequenceBatch

STEP = 1e-5
FLOOR = 1e-5  # denominator floor: near-zero gradients are compared absolutely


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, arr, h=STEP):
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def _randomize(model, rng, scale=0.5):
    for p in mdl.named_params(model).values():
        p[...] = rng.uniform(-scale, scale, p.shape)


def check_dense(rng):
    D, H, N = rng.integers(2, 7), rng.integers(2, 5), rng.integers(1, 5)
    layer = net.DenseLayer(rng.normal(size=(D, H)), rng.normal(size=H), "relu")
    x = rng.normal(size=(N, D))
    r = rng.normal(size=(N, H))

    def f():
        return float(np.sum(net.dense_forward(layer, x) * r))

    dx, dW, db = net.dense_backward(layer, x, r)
    return max(rel_error(dW, numeric_grad(f, layer.W)), rel_error(db, numeric_grad(f, layer.b)),
               rel_error(dx, numeric_grad(f, x)))


def check_delta(rng):
    B, T, D = 2, rng.integers(1, 8), rng.integers(1, 4)
    lengths = np.array([T, rng.integers(1, T + 1)])
    x = rng.normal(size=(B, T, D))
    r = rng.normal(size=(B, T, 3 * D))
    cfg = net.DeltaConfig()

    def f():
        return float(np.sum(net.delta_features(x, cfg, lengths) * r))

    mask = (np.arange(T)[None] < lengths[:, None])[..., None]
    return rel_error(net.delta_backward(r, cfg, lengths), numeric_grad(f, x) * mask)


def check_lstm(rng):
    B, T, D, H = 2, rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 5)
    lengths = np.array([T, rng.integers(1, T + 1)])
    mask = np.arange(T)[None] < lengths[:, None]
    p = net.LstmParams(rng.normal(size=(D, 4 * H)) * 0.7, rng.normal(size=(H, 4 * H)) * 0.7,
                       rng.normal(size=4 * H) * 0.5)
    x = rng.normal(size=(B, T, D)) * mask[..., None]
    r = rng.normal(size=(B, T, H))

    def f():
        return float(np.sum(net.lstm_forward(p, x, mask)[0] * r))

    _, cache = net.lstm_forward(p, x, mask)
    dx, g = net.lstm_backward(p, cache, r)
    errs = [rel_error(getattr(g, k), numeric_grad(f, getattr(p, k))) for k in ("Wx", "Wh", "b")]
    errs.append(rel_error(dx, numeric_grad(f, x)))
    return max(errs)


def check_blstm(rng):
    B, T, D, H = 2, rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 5)
    lengths = np.array([T, rng.integers(1, T + 1)])
    mask = np.arange(T)[None] < lengths[:, None]
    params = net.init_blstm(D, H, rng, np.float64)
    for lp in (params.fwd, params.bwd):
        lp.b[...] = rng.normal(size=lp.b.shape) * 0.5
    x = rng.normal(size=(B, T, D)) * mask[..., None]
    r = rng.normal(size=(B, T, 2 * H))

    def f():
        return float(np.sum(net.blstm_forward(params, x, lengths)[0] * r))

    _, cache = net.blstm_forward(params, x, lengths)
    dx, gf, gb = net.blstm_backward(params, cache, r)
    errs = [rel_error(dx, numeric_grad(f, x))]
    for p, g in ((params.fwd, gf), (params.bwd, gb)):
        errs += [rel_error(getattr(g, k), numeric_grad(f, getattr(p, k))) for k in ("Wx", "Wh", "b")]
    return max(errs)


def check_head(rng):
    """Cross-entropy of the softmax head against ``softmax(z) - onehot``."""
    B, T, D, C = 2, rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 6)
    lengths = np.array([T, rng.integers(1, T + 1)])
    mask = np.arange(T)[None] < lengths[:, None]
    head = net.DenseLayer(rng.normal(size=(D, C)), rng.normal(size=C), "linear")
    x = rng.normal(size=(B, T, D))
    labels = rng.integers(0, C, B)

    def f():
        return train.frame_cross_entropy(net.head_logits(head, x), labels, mask)[0]

    _, dlogits = train.frame_cross_entropy(net.head_logits(head, x), labels, mask)
    dx, dW, db = net.dense_backward(head, x, dlogits)
    return max(rel_error(dW, numeric_grad(f, head.W)), rel_error(db, numeric_grad(f, head.b)),
               rel_error(dx, numeric_grad(f, x)))


def _toy_config(rng, views):
    dims = {v: (int(rng.integers(1, 4)), int(rng.integers(2, 5))) for v in views}
    return mdl.ModelConfig(
        views=views, input_dims=dims,
        encoder_sizes=tuple(int(s) for s in rng.integers(2, 5, 3)),
        bottleneck_dim=int(rng.integers(1, 4)), stream_hidden=int(rng.integers(1, 5)),
        fusion_hidden=int(rng.integers(1, 5)), num_classes=int(rng.integers(2, 5)), precision=64,
    )


def _check_model(model, cfg, rng):
    _randomize(model, rng)
    B = 2
    T = int(rng.integers(1, 6))
    lengths = np.array([T, rng.integers(1, T + 1)])
    batches = {v: SequenceBatch(rng.normal(size=(B, T, cfg.input_dim(v))), lengths)
               for v in model.views}
    labels = rng.integers(0, cfg.num_classes, B)
    _, grads = train.loss_and_grads(model, batches, labels)

    def f():
        logits, _ = mdl.forward_logits(model, batches)
        return train.frame_cross_entropy(logits, labels, batches[model.views[0]].mask)[0]

    return max(rel_error(grads[k], numeric_grad(f, p)) for k, p in mdl.named_params(model).items())


def check_stream(rng):
    cfg = _toy_config(rng, (0,))
    return _check_model(mdl.build_stream(cfg, 0, None, rng), cfg, rng)


def check_multiview(rng):
    cfg = _toy_config(rng, (0, 90))
    streams = {v: mdl.build_stream(cfg, v, None, rng) for v in cfg.views}
    return _check_model(mdl.build_multiview(streams, cfg, rng), cfg, rng)


CHECKS = {
    "dense": check_dense,
    "delta": check_delta,
    "lstm": check_lstm,
    "blstm": check_blstm,
    "softmax_head": check_head,
    "stream_chain": check_stream,
    "multiview_chain": check_multiview,
}


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    trials: int

    def passed(self, tol=1e-5):
        return self.max_rel_error < tol


def run_suite(trials=20, seed=0, names=None):
    """Run each check over ``trials`` seeds; returns one result per check."""
    out = []
    for name in names or CHECKS:
        worst = max(CHECKS[name](ndcore.make_rng(seed, "gradcheck", name, t)) for t in range(trials))
        out.append(GradcheckResult(name, worst, trials))
    return out
