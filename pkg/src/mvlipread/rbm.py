"""Gaussian-visible RBMs trained with contrastive divergence, stacked greedily
to initialise the frame encoder.

Visible units are linear with unit variance (inputs are z-normalised). Hidden
units are noisy rectified linear for the three wide layers and Gaussian
linear for the bottleneck.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ndcore
from .errors import InvalidArgument, NumericFailure
from .model import EncoderParams
from .net import DenseLayer


@dataclass(frozen=True)
class CdConfig:
    epochs: int = 20
    batch_size: int = 100
    l2: float = 0.0002
    lr: float = 0.001
    cd_steps: int = 1
    momentum_early: float = 0.5
    momentum_late: float = 0.9
    momentum_switch_epoch: int = 5
    init_std: float = 0.01
    # train RBMs 2-4 on per-unit standardised activations and fold the
    # shift and scale back into the layer; RBM 1 sees the z-normalised frames
    standardize: bool = True
    std_floor: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.cd_steps < 1:
            raise InvalidArgument("epochs, batch_size and cd_steps must be >= 1")
        if self.lr < 0 or self.l2 < 0:
            raise InvalidArgument("lr and l2 must be non-negative")

    def momentum(self, epoch):
        return self.momentum_late if epoch >= self.momentum_switch_epoch else self.momentum_early


@dataclass
class GaussianRbm:
    W: np.ndarray  # (visible, hidden)
    vbias: np.ndarray
    hbias: np.ndarray
    hidden_kind: str = "noisy-relu"
    name: str = "rbm"
    vel_W: np.ndarray = field(default=None, repr=False)
    vel_v: np.ndarray = field(default=None, repr=False)
    vel_h: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.hidden_kind not in ("noisy-relu", "linear"):
            raise InvalidArgument(f"unknown hidden kind {self.hidden_kind!r}")
        if self.vel_W is None:
            self.vel_W = np.zeros_like(self.W)
            self.vel_v = np.zeros_like(self.vbias)
            self.vel_h = np.zeros_like(self.hbias)

    @classmethod
    def init(cls, n_visible, n_hidden, rng, hidden_kind="noisy-relu", std=0.01,
             dtype=np.float32, name="rbm"):
        W = (rng.standard_normal((n_visible, n_hidden)) * std).astype(dtype)
        return cls(W, np.zeros(n_visible, dtype), np.zeros(n_hidden, dtype), hidden_kind, name)

    def hidden_input(self, v):
        return v @ self.W + self.hbias

    def hidden_mean(self, v):
        x = self.hidden_input(v)
        return np.maximum(x, 0) if self.hidden_kind == "noisy-relu" else x

    def sample_hidden(self, x, rng):
        noise = rng.standard_normal(x.shape).astype(x.dtype)
        if self.hidden_kind == "linear":
            return x + noise
        return np.maximum(x + noise * np.sqrt(ndcore.sigmoid(x)), 0)

    def visible_mean(self, h):
        return h @ self.W.T + self.vbias

    def to_layer(self):
        act = "linear" if self.hidden_kind == "linear" else "relu"
        return DenseLayer(self.W.copy(), self.hbias.copy(), act)


def cd_update(rbm, batch, cfg, rng, epoch=1):
    """One CD-k step on ``batch`` (rows are visible vectors), in place.

    Returns ``(rbm, reconstruction_error)`` where the error is the mean
    squared difference between the batch and its first reconstruction.
    """
    if batch.ndim != 2 or batch.shape[1] != rbm.W.shape[0]:
        raise InvalidArgument(f"{rbm.name}: batch {batch.shape} vs {rbm.W.shape[0]} visible units")
    if batch.shape[0] > cfg.batch_size:
        raise InvalidArgument(f"{rbm.name}: batch of {batch.shape[0]} exceeds {cfg.batch_size}")
    v0 = batch.astype(rbm.W.dtype, copy=False)
    x0 = rbm.hidden_input(v0)
    h0 = np.maximum(x0, 0) if rbm.hidden_kind == "noisy-relu" else x0
    hs = rbm.sample_hidden(x0, rng)
    v1 = None
    for k in range(cfg.cd_steps):
        vk = rbm.visible_mean(hs)
        if v1 is None:
            v1 = vk
        xk = rbm.hidden_input(vk)
        hk = np.maximum(xk, 0) if rbm.hidden_kind == "noisy-relu" else xk
        if k + 1 < cfg.cd_steps:
            hs = rbm.sample_hidden(xk, rng)
    if not (np.all(np.isfinite(vk)) and np.all(np.isfinite(hk))):
        raise NumericFailure(rbm.name, detail="contrastive divergence activations")
    n = v0.shape[0]
    gW = (v0.T @ h0 - vk.T @ hk) / n - cfg.l2 * rbm.W
    gv = (v0 - vk).mean(axis=0)
    gh = (h0 - hk).mean(axis=0)
    m = rbm.W.dtype.type(cfg.momentum(epoch))
    lr = rbm.W.dtype.type(cfg.lr)
    rbm.vel_W = m * rbm.vel_W + lr * gW.astype(rbm.W.dtype)
    rbm.vel_v = m * rbm.vel_v + lr * gv.astype(rbm.W.dtype)
    rbm.vel_h = m * rbm.vel_h + lr * gh.astype(rbm.W.dtype)
    rbm.W += rbm.vel_W
    rbm.vbias += rbm.vel_v
    rbm.hbias += rbm.vel_h
    err = float(np.mean((v0.astype(np.float64) - v1) ** 2))
    return rbm, err


def train_rbm(rbm, data, cfg, rng, log=None):
    """Run ``cfg.epochs`` of CD over ``data``; returns per-epoch mean error."""
    history = []
    n = data.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        errs, sizes = [], []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            _, e = cd_update(rbm, data[idx], cfg, rng, epoch)
            errs.append(e)
            sizes.append(len(idx))
        history.append(float(np.average(errs, weights=sizes)))
        if log:
            log(f"{rbm.name} epoch {epoch}: reconstruction error {history[-1]:.5f}")
    return history


def pretrain_stack(data, layer_sizes, cfg=CdConfig(), rng=None, dtype=np.float32,
                   histories=None, log=None):
    """Greedy layer-wise pretraining of the four encoder layers.

    RBM k is trained on the mean hidden activations of RBM k-1. Per-layer
    reconstruction histories are appended to ``histories`` when given.
    """
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidArgument("pretrain_stack needs a non-empty (frames, dim) array")
    if len(layer_sizes) != 4:
        raise InvalidArgument(f"layer_sizes must have 4 entries, got {list(layer_sizes)}")
    rng = rng if rng is not None else ndcore.make_rng(0, "pretrain")
    x = data.astype(dtype, copy=False)
    layers = []
    histories = histories if histories is not None else []
    for k, size in enumerate(layer_sizes):
        kind = "linear" if k == len(layer_sizes) - 1 else "noisy-relu"
        shift = scale = None
        if k > 0 and cfg.standardize:
            shift = x.mean(axis=0)
            scale = np.maximum(x.std(axis=0), cfg.std_floor).astype(dtype)
            x = ((x - shift) / scale).astype(dtype)
        rbm = GaussianRbm.init(x.shape[1], int(size), rng, kind, cfg.init_std, dtype, f"rbm{k}")
        histories.append(train_rbm(rbm, x, cfg, rng, log))
        layer = rbm.to_layer()
        if shift is not None:
            layer = fold_standardization(layer, shift, scale)
        layers.append(layer)
        x = rbm.hidden_mean(x)
    return EncoderParams(layers)


def fold_standardization(layer, shift, scale):
    """Dense layer on raw inputs equal to ``layer`` on ``(x - shift) / scale``."""
    W = layer.W / scale[:, None]
    b = layer.b - (shift / scale) @ layer.W
    return DenseLayer(W.astype(layer.W.dtype), b.astype(layer.b.dtype), layer.activation)
