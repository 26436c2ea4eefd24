"""Single-stream and multi-view network assembly, full-chain forward and
backward passes, and the ``MVLM`` checkpoint format.

Parameter naming (also used as checkpoint tensor names)::

    view/<angle>/enc/<k>/{W,b}           encoder layer k (k = 3 is the bottleneck)
    view/<angle>/blstm/{fwd,bwd}/{Wx,Wh,b}
    view/<angle>/head/{W,b}              single-stream softmax head only
    fusion/blstm/{fwd,bwd}/{Wx,Wh,b}
    head/{W,b}                           multi-view softmax head
    meta/delta_window                    int64 scalar
"""

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndcore, net
from .errors import (
    BadMagic,
    FormatError,
    InvalidArgument,
    TruncatedFile,
    VersionMismatch,
    ViewMismatch,
)
from .net import BlstmParams, DeltaConfig, DenseLayer, LstmParams, SequenceBatch

VIEWS = (0, 30, 45, 60, 90)

# mouth ROI height/width in pixels per view angle
ROI_SIZES = {0: (29, 50), 30: (29, 44), 45: (29, 43), 60: (35, 44), 90: (44, 30)}


def check_view(angle):
    if angle not in VIEWS:
        raise InvalidArgument(f"invalid view angle {angle}; must be one of {VIEWS}")
    return int(angle)


@dataclass
class ModelConfig:
    views: tuple = (0,)
    input_dims: dict = field(default_factory=dict)  # angle -> (H, W)
    encoder_sizes: tuple = (2000, 1000, 500)
    bottleneck_dim: int = 50
    stream_hidden: int = 250
    fusion_hidden: int = 250
    num_classes: int = 10
    delta_window: int = 2
    forget_bias: float = 1.0
    precision: int = 32

    def __post_init__(self):
        self.views = tuple(check_view(v) for v in self.views)
        if not self.views or len(set(self.views)) != len(self.views):
            raise InvalidArgument(f"views must be non-empty and distinct, got {self.views}")
        self.input_dims = {int(k): tuple(v) for k, v in self.input_dims.items()}
        for v in self.views:
            self.input_dims.setdefault(v, ROI_SIZES[v])
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if len(self.encoder_sizes) != 3:
            raise InvalidArgument("encoder_sizes must have exactly 3 entries")
        dims = [*self.encoder_sizes, self.bottleneck_dim, self.stream_hidden,
                self.fusion_hidden, self.num_classes]
        if min(dims) < 1 or any(min(hw) < 1 for hw in self.input_dims.values()):
            raise InvalidArgument("all model dimensions must be >= 1")

    @property
    def dtype(self):
        return ndcore.as_dtype(self.precision)

    @property
    def delta(self):
        return DeltaConfig(self.delta_window)

    def input_dim(self, view):
        H, W = self.input_dims[view]
        return H * W

    def layer_sizes(self):
        """RBM stack sizes: three hidden layers then the bottleneck."""
        return [*self.encoder_sizes, self.bottleneck_dim]


@dataclass
class EncoderParams:
    layers: list  # DenseLayer; relu except the final linear bottleneck

    def __post_init__(self):
        if len(self.layers) != 4:
            raise InvalidArgument(f"encoder needs 4 layers, got {len(self.layers)}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise InvalidArgument("encoder layer shapes do not chain")

    @property
    def input_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].W.shape[1]


@dataclass
class StreamParams:
    view: int
    encoder: EncoderParams
    blstm: BlstmParams
    head: DenseLayer = None
    delta_window: int = 2

    def __post_init__(self):
        if 3 * self.encoder.output_dim != self.blstm.input_size:
            raise InvalidArgument(
                f"stream {self.view}: 3 x bottleneck {self.encoder.output_dim} "
                f"!= BLSTM input {self.blstm.input_size}"
            )

    @property
    def views(self):
        return (self.view,)


@dataclass
class MultiViewParams:
    streams: dict  # angle -> StreamParams without head
    fusion: BlstmParams
    head: DenseLayer

    def __post_init__(self):
        width = sum(2 * s.blstm.hidden_size for s in self.streams.values())
        if width != self.fusion.input_size:
            raise InvalidArgument(
                f"fusion input {self.fusion.input_size} != concatenated stream width {width}"
            )

    @property
    def views(self):
        return tuple(self.streams)


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def init_encoder(input_dim, layer_sizes, rng, dtype=np.float32):
    sizes = [input_dim, *layer_sizes]
    layers = []
    for k in range(4):
        layers.append(
            DenseLayer(
                ndcore.glorot_init(sizes[k], sizes[k + 1], rng, dtype),
                np.zeros(sizes[k + 1], dtype=dtype),
                "linear" if k == 3 else "relu",
            )
        )
    return EncoderParams(layers)


def build_stream(cfg, view, pretrained=None, rng=None):
    """Encoder (pretrained or glorot) + BLSTM + softmax head for one view."""
    view = check_view(view)
    if view not in cfg.input_dims:
        raise InvalidArgument(f"view {view} has no declared input size")
    rng = rng if rng is not None else ndcore.make_rng(0, view, "build")
    dtype = cfg.dtype
    D = cfg.input_dim(view)
    if pretrained is None:
        encoder = init_encoder(D, cfg.layer_sizes(), rng, dtype)
    else:
        want = [D, *cfg.layer_sizes()]
        got = [pretrained.layers[0].W.shape[0]] + [l.W.shape[1] for l in pretrained.layers]
        if want != got:
            raise InvalidArgument(f"pretrained encoder sizes {got} do not match config {want}")
        encoder = EncoderParams(
            [DenseLayer(l.W.astype(dtype), l.b.astype(dtype), l.activation)
             for l in copy.deepcopy(pretrained.layers)]
        )
    blstm = net.init_blstm(3 * cfg.bottleneck_dim, cfg.stream_hidden, rng, dtype, cfg.forget_bias)
    head = net.init_head(2 * cfg.stream_hidden, cfg.num_classes, rng, dtype)
    return StreamParams(view, encoder, blstm, head, cfg.delta_window)


def build_multiview(single_streams, cfg, rng=None):
    """Copy trained streams (dropping their heads) under a fresh fusion BLSTM and head."""
    missing = [v for v in cfg.views if v not in single_streams]
    if missing:
        raise InvalidArgument(f"no trained stream for views {missing}")
    rng = rng if rng is not None else ndcore.make_rng(0, "fusion")
    streams = {}
    for v in cfg.views:
        s = single_streams[v]
        if s.view != v:
            raise InvalidArgument(f"stream for view {v} reports view {s.view}")
        if s.encoder.input_dim != cfg.input_dim(v):
            raise InvalidArgument(
                f"stream {v} input dim {s.encoder.input_dim} != config {cfg.input_dim(v)}"
            )
        streams[v] = StreamParams(
            v, copy.deepcopy(s.encoder), copy.deepcopy(s.blstm), None, s.delta_window
        )
    width = sum(2 * s.blstm.hidden_size for s in streams.values())
    dtype = cfg.dtype
    fusion = net.init_blstm(width, cfg.fusion_hidden, rng, dtype, cfg.forget_bias)
    head = net.init_head(2 * cfg.fusion_hidden, cfg.num_classes, rng, dtype)
    return MultiViewParams(streams, fusion, head)


def parameter_count(cfg, multiview=None):
    """Closed-form number of scalar parameters implied by ``cfg``."""
    def blstm(d, h):
        return 2 * (d * 4 * h + h * 4 * h + 4 * h)

    def stream(v, with_head):
        sizes = [cfg.input_dim(v), *cfg.layer_sizes()]
        n = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
        n += blstm(3 * cfg.bottleneck_dim, cfg.stream_hidden)
        if with_head:
            n += 2 * cfg.stream_hidden * cfg.num_classes + cfg.num_classes
        return n

    if multiview is None:
        multiview = len(cfg.views) > 1
    if not multiview:
        return stream(cfg.views[0], True)
    n = sum(stream(v, False) for v in cfg.views)
    n += blstm(2 * cfg.stream_hidden * len(cfg.views), cfg.fusion_hidden)
    n += 2 * cfg.fusion_hidden * cfg.num_classes + cfg.num_classes
    return n


# --------------------------------------------------------------------------
# parameter naming
# --------------------------------------------------------------------------


def _blstm_params(prefix, b):
    out = {}
    for d, p in (("fwd", b.fwd), ("bwd", b.bwd)):
        for k, a in p.arrays().items():
            out[f"{prefix}/{d}/{k}"] = a
    return out


def _encoder_params(prefix, enc):
    out = {}
    for k, layer in enumerate(enc.layers):
        out[f"{prefix}/enc/{k}/W"] = layer.W
        out[f"{prefix}/enc/{k}/b"] = layer.b
    return out


def _stream_params(stream):
    prefix = f"view/{stream.view}"
    out = _encoder_params(prefix, stream.encoder)
    out.update(_blstm_params(prefix + "/blstm", stream.blstm))
    if stream.head is not None:
        out[prefix + "/head/W"] = stream.head.W
        out[prefix + "/head/b"] = stream.head.b
    return out


def named_params(model):
    """Ordered ``name -> array`` view of every trainable array (no copies)."""
    if isinstance(model, StreamParams):
        return _stream_params(model)
    if isinstance(model, MultiViewParams):
        out = {}
        for s in model.streams.values():
            out.update(_stream_params(s))
        out.update(_blstm_params("fusion/blstm", model.fusion))
        out["head/W"] = model.head.W
        out["head/b"] = model.head.b
        return out
    if isinstance(model, dict):  # view -> EncoderParams
        out = {}
        for v, enc in model.items():
            out.update(_encoder_params(f"view/{v}", enc))
        return out
    raise InvalidArgument(f"cannot enumerate parameters of {type(model).__name__}")


def is_lstm_param(name):
    return "/blstm/" in name


def snapshot(model):
    return {k: v.copy() for k, v in named_params(model).items()}


def restore(model, snap):
    for k, v in named_params(model).items():
        np.copyto(v, snap[k])


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def as_view_batches(model, batches):
    if isinstance(batches, SequenceBatch):
        if len(model.views) != 1:
            raise ViewMismatch(f"model expects views {list(model.views)}, got one unlabeled batch")
        batches = {model.views[0]: batches}
    if set(batches) != set(model.views):
        raise ViewMismatch(
            f"batch views {sorted(batches)} do not match model views {sorted(model.views)}"
        )
    ref = None
    for v in model.views:
        b = batches[v]
        if ref is None:
            ref = b.lengths
        elif b.lengths.shape != ref.shape or np.any(b.lengths != ref):
            raise InvalidArgument(
                f"frame counts disagree across views: {ref.tolist()} vs view {v} {b.lengths.tolist()}"
            )
    return batches


def stream_forward(stream, batch):
    """Encoder -> delta/delta-delta -> BLSTM; returns ``(B, T, 2H)`` and a cache."""
    B, T, D = batch.x.shape
    if D != stream.encoder.input_dim:
        raise InvalidArgument(f"view {stream.view}: frame dim {D} != {stream.encoder.input_dim}")
    mask = batch.mask
    x = np.where(mask[..., None], batch.x, 0).astype(batch.x.dtype, copy=False)
    acts = [x.reshape(B * T, D)]
    for k, layer in enumerate(stream.encoder.layers):
        acts.append(net.dense_forward(layer, acts[-1]))
    z = acts[-1].reshape(B, T, -1)
    cfg = DeltaConfig(stream.delta_window)
    feats = net.delta_features(z, cfg, batch.lengths)
    out, bcache = net.blstm_forward(stream.blstm, feats, batch.lengths, f"view/{stream.view}/blstm")
    return out, (acts, batch.lengths, mask, bcache, cfg)


def stream_backward(stream, cache, dout):
    acts, lengths, mask, bcache, cfg = cache
    prefix = f"view/{stream.view}"
    grads = {}
    dfeats, g_f, g_b = net.blstm_backward(stream.blstm, bcache, dout)
    grads.update(_blstm_params(prefix + "/blstm", BlstmParams(g_f, g_b)))
    B, T = mask.shape
    dz = net.delta_backward(dfeats, cfg, lengths).reshape(B * T, -1)
    for k in range(3, -1, -1):
        layer = stream.encoder.layers[k]
        dz, dW, db = net.dense_backward(layer, acts[k], dz, acts[k + 1])
        grads[f"{prefix}/enc/{k}/W"] = dW
        grads[f"{prefix}/enc/{k}/b"] = db
    return grads


def forward_logits(model, batches):
    """Per-frame class logits ``(B, T, C)`` plus a cache for :func:`backward`."""
    batches = as_view_batches(model, batches)
    if isinstance(model, StreamParams):
        b = batches[model.view]
        h, scache = stream_forward(model, b)
        if model.head is None:
            raise InvalidArgument(f"stream {model.view} has no softmax head")
        logits = net.head_logits(model.head, h)
        return logits, ("stream", scache, h)
    outs, caches = [], {}
    for v, s in model.streams.items():
        h, caches[v] = stream_forward(s, batches[v])
        outs.append(h)
    fused_in = np.concatenate(outs, axis=-1)
    lengths = batches[model.views[0]].lengths
    fused, fcache = net.blstm_forward(model.fusion, fused_in, lengths, "fusion/blstm")
    logits = net.head_logits(model.head, fused)
    return logits, ("multi", caches, fcache, fused)


def forward(model, batches):
    """Per-frame class distributions ``(B, T, C)``; padded frames are zero rows."""
    batches = as_view_batches(model, batches)
    logits, _ = forward_logits(model, batches)
    mask = next(iter(batches.values())).mask
    probs = ndcore.softmax(logits)
    return np.where(mask[..., None], probs, 0)


def backward(model, cache, dlogits):
    """Gradients of every named parameter given ``dL/dlogits``."""
    if cache[0] == "stream":
        _, scache, h = cache
        dh, dW, db = net.dense_backward(model.head, h, dlogits)
        grads = stream_backward(model, scache, dh)
        grads[f"view/{model.view}/head/W"] = dW
        grads[f"view/{model.view}/head/b"] = db
        return grads
    _, caches, fcache, fused = cache
    grads = {}
    dfused, dW, db = net.dense_backward(model.head, fused, dlogits)
    din, g_f, g_b = net.blstm_backward(model.fusion, fcache, dfused)
    off = 0
    for v, s in model.streams.items():
        w = 2 * s.blstm.hidden_size
        grads.update(stream_backward(s, caches[v], din[..., off : off + w]))
        off += w
    grads.update(_blstm_params("fusion/blstm", BlstmParams(g_f, g_b)))
    grads["head/W"] = dW
    grads["head/b"] = db
    names = named_params(model)
    return {k: grads[k] for k in names}


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"MVLM"
CKPT_VERSION = 1
_PRECISION = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_PRECISION_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def _tensors_of(model):
    tensors = dict(named_params(model))
    if isinstance(model, StreamParams):
        window = model.delta_window
    elif isinstance(model, MultiViewParams):
        window = next(iter(model.streams.values())).delta_window
    else:
        window = None
    if window is not None:
        tensors["meta/delta_window"] = np.array([window], dtype=np.int64)
    return tensors


def save_checkpoint(model, path):
    """Write ``model`` (stream, multi-view, or ``{angle: EncoderParams}``) to ``path``.

    Layout, all little-endian: ``b"MVLM"``, u32 version, u32 tensor count, then
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 x rank dims,
    u8 precision code (1 = f32, 2 = f64, 3 = i64), raw values in row-major order.
    """
    tensors = _tensors_of(model)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _PRECISION_CODE.get(arr.dtype)
        if code is None:
            raise InvalidArgument(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_PRECISION[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, path, buf):
        self.path = path
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(self.path, self.pos + n, len(self.buf), what)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(path, buf)
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagic(path, CKPT_MAGIC, bytes(buf[:4]), offset=0)
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version != CKPT_VERSION:
        raise VersionMismatch(path, CKPT_VERSION, version, offset=4)
    (count,) = r.unpack("<I", "header")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} header")
        dims = r.unpack(f"<{rank}I", f"{name} header")
        (code,) = r.unpack("<B", f"{name} header")
        if code not in _PRECISION:
            raise FormatError(f"{path}: {name} has unknown precision code {code} at offset {r.pos - 1}")
        dt = _PRECISION[code]
        count_vals = int(np.prod(dims)) if rank else 1
        data = r.take(count_vals * dt.itemsize, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return tensors


def _lstm_from(t, prefix):
    return LstmParams(t[prefix + "/Wx"], t[prefix + "/Wh"], t[prefix + "/b"])


def _encoder_from(t, prefix):
    return EncoderParams(
        [DenseLayer(t[f"{prefix}/enc/{k}/W"], t[f"{prefix}/enc/{k}/b"], "linear" if k == 3 else "relu")
         for k in range(4)]
    )


def _stream_from(t, view, window):
    p = f"view/{view}"
    head = None
    if p + "/head/W" in t:
        head = DenseLayer(t[p + "/head/W"], t[p + "/head/b"], "linear")
    blstm = BlstmParams(_lstm_from(t, p + "/blstm/fwd"), _lstm_from(t, p + "/blstm/bwd"))
    return StreamParams(view, _encoder_from(t, p), blstm, head, window)


def load_checkpoint(path, views=None):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns a :class:`MultiViewParams`, a :class:`StreamParams`, or a
    ``{angle: EncoderParams}`` dict depending on what the file holds. When
    ``views`` is given, the stored views must match it exactly.
    """
    t = read_tensors(path)
    stored = sorted({int(k.split("/")[1]) for k in t if k.startswith("view/")})
    if views is not None and sorted(int(v) for v in views) != stored:
        raise ViewMismatch(
            f"{path}: checkpoint holds views {stored} but {sorted(int(v) for v in views)} were requested"
        )
    window = int(t["meta/delta_window"][0]) if "meta/delta_window" in t else 2
    try:
        if "fusion/blstm/fwd/Wx" in t:
            streams = {v: _stream_from(t, v, window) for v in stored}
            fusion = BlstmParams(_lstm_from(t, "fusion/blstm/fwd"), _lstm_from(t, "fusion/blstm/bwd"))
            head = DenseLayer(t["head/W"], t["head/b"], "linear")
            return MultiViewParams(streams, fusion, head)
        if any("/blstm/" in k for k in t):
            if len(stored) != 1:
                raise FormatError(f"{path}: stream checkpoint with views {stored}")
            return _stream_from(t, stored[0], window)
        return {v: _encoder_from(t, f"view/{v}") for v in stored}
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc.args[0]}") from None
