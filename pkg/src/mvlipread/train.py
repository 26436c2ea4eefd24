"""Frame-level cross-entropy, Adam, LSTM gradient clipping, early stopping,
and the single-stream / multi-view training procedures."""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mdl
from . import ndcore
from .errors import InvalidArgument, NumericFailure
from .evaluate import majority_vote
from .net import SequenceBatch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_single: float = 0.0003
    lr_fusion: float = 0.0001
    batch_utterances: int = 10
    early_stop_delay: int = 5
    clip_magnitude: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    seed: int = 0
    deterministic: bool = True
    eval_batch: int = 50

    def __post_init__(self):
        if self.lr_single < 0 or self.lr_fusion < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if self.early_stop_delay < 1 or self.batch_utterances < 1 or self.max_epochs < 1:
            raise InvalidArgument("delay, batch size and max_epochs must be >= 1")
        if self.clip_magnitude <= 0:
            raise InvalidArgument("clip_magnitude must be positive")


@dataclass
class RunRecord:
    seed: int
    config: dict
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    test: dict = field(default_factory=dict)

    def to_jsonl(self):
        """One JSON line per epoch followed by a summary line."""
        lines = []
        for k in range(len(self.train_loss)):
            lines.append(json.dumps({
                "epoch": k + 1, "train_loss": self.train_loss[k],
                "val_loss": self.val_loss[k], "val_accuracy": self.val_accuracy[k],
            }, sort_keys=True))
        lines.append(json.dumps({
            "summary": True, "seed": self.seed, "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch, "test": self.test, "config": self.config,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def frame_cross_entropy(logits, labels, mask=None):
    """Mean per-frame negative log-likelihood of the utterance label.

    ``logits`` is ``(T, C)`` for one utterance or ``(B, T, C)`` for a batch.
    The loss averages over each utterance's valid frames and then over the
    batch. Returns ``(loss, dlogits)``; padded frames get zero gradient.
    """
    single = logits.ndim == 2
    if single:
        logits = logits[None]
        labels = np.atleast_1d(labels)
        mask = None if mask is None else np.asarray(mask)[None]
    B, T, C = logits.shape
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidArgument(f"labels {labels.tolist()} outside [0, {C})")
    mask = np.ones((B, T), bool) if mask is None else np.asarray(mask, bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise InvalidArgument("utterance with no valid frames")
    logp = ndcore.log_softmax(logits)
    picked = np.take_along_axis(logp, labels[:, None, None].repeat(T, 1), axis=2)[..., 0]
    per_utt = -np.where(mask, picked, 0).sum(axis=1) / counts
    loss = float(per_utt.mean())
    probs = np.exp(logp)
    probs[np.arange(B)[:, None], np.arange(T)[None, :], labels[:, None]] -= 1
    scale = (mask / (counts[:, None] * B)).astype(logits.dtype)
    dlogits = probs * scale[..., None]
    return loss, (dlogits[0] if single else dlogits)


# --------------------------------------------------------------------------
# optimiser pieces
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place to the ``params`` arrays."""
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidArgument(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p -= step
    return params, state


def clip_lstm_gradients(grads, magnitude):
    """Clamp every LSTM gradient entry to ``[-magnitude, magnitude]`` in place."""
    if magnitude <= 0:
        raise InvalidArgument("clip magnitude must be positive")
    for name, g in grads.items():
        if mdl.is_lstm_param(name):
            np.clip(g, -magnitude, magnitude, out=g)
    return grads


class EarlyStopper:
    """Stop once ``delay`` consecutive epochs fail to set a strict new minimum."""

    def __init__(self, delay=5):
        if delay < 1:
            raise InvalidArgument("early stopping delay must be >= 1")
        self.delay = delay
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, loss):
        """Record one epoch's validation loss; True if it is a new best."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.delay


def early_stopper(history, delay=5):
    """Replay ``history``; returns ``(stop, best_epoch, stop_epoch)`` with 1-based epochs."""
    es = EarlyStopper(delay)
    for loss in history:
        es.update(loss)
        if es.should_stop:
            return True, es.best_epoch, es.epoch
    return False, es.best_epoch, None


# --------------------------------------------------------------------------
# batching and evaluation
# --------------------------------------------------------------------------


def make_batch(examples, views, dtype):
    batches = {v: SequenceBatch.from_sequences([e.frames[v] for e in examples], dtype) for v in views}
    labels = np.array([e.label for e in examples])
    return batches, labels


def loss_and_grads(model, batches, labels):
    batches = mdl.as_view_batches(model, batches)
    logits, cache = mdl.forward_logits(model, batches)
    mask = next(iter(batches.values())).mask
    loss, dlogits = frame_cross_entropy(logits, labels, mask)
    return loss, mdl.backward(model, cache, dlogits)


def predict(model, examples, batch_size=50, dtype=None):
    """Per-utterance majority-vote labels and the mean per-utterance loss."""
    dtype = dtype or next(iter(mdl.named_params(model).values())).dtype
    preds, losses = [], []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        batches, labels = make_batch(chunk, model.views, dtype)
        logits, _ = mdl.forward_logits(model, batches)
        mask = next(iter(batches.values())).mask
        loss, _ = frame_cross_entropy(logits, labels, mask)
        losses.append(loss * len(chunk))
        frame_labels = logits.argmax(axis=-1)
        for k, L in enumerate(batches[model.views[0]].lengths):
            preds.append(majority_vote(frame_labels[k, :L]))
    return np.array(preds), float(sum(losses) / len(examples))


def evaluate_split(model, examples, batch_size=50):
    preds, loss = predict(model, examples, batch_size)
    labels = np.array([e.label for e in examples])
    return {"loss": loss, "accuracy": float(np.mean(preds == labels)), "predictions": preds.tolist(),
            "labels": labels.tolist(), "subjects": [e.subject for e in examples]}


# --------------------------------------------------------------------------
# training procedures
# --------------------------------------------------------------------------


def _fit(model, dataset, cfg, lr, tag):
    for split in ("train", "val"):
        if not dataset.get(split):
            raise InvalidArgument(f"{tag}: empty {split} split")
    params = mdl.named_params(model)
    dtype = next(iter(params.values())).dtype
    train = dataset["train"]
    rng = ndcore.make_rng(cfg.seed, "shuffle", tag)
    state = AdamState()
    stopper = EarlyStopper(cfg.early_stop_delay)
    record = RunRecord(cfg.seed, {**asdict(cfg), "lr": lr, "stage": tag})
    best = mdl.snapshot(model)
    with ndcore.deterministic(cfg.deterministic):
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(train))
            total = 0.0
            for bi, s in enumerate(range(0, len(train), cfg.batch_utterances)):
                chunk = [train[i] for i in order[s : s + cfg.batch_utterances]]
                batches, labels = make_batch(chunk, model.views, dtype)
                try:
                    loss, grads = loss_and_grads(model, batches, labels)
                except NumericFailure as exc:
                    raise NumericFailure(f"{tag} epoch {epoch} batch {bi}: {exc.where}",
                                         exc.timestep) from exc
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericFailure(f"{tag} epoch {epoch} batch {bi}", detail="loss or gradient")
                clip_lstm_gradients(grads, cfg.clip_magnitude)
                adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                total += loss * len(chunk)
            val = evaluate_split(model, dataset["val"], cfg.eval_batch)
            record.train_loss.append(total / len(train))
            record.val_loss.append(val["loss"])
            record.val_accuracy.append(val["accuracy"])
            log.info("%s epoch %d: train %.4f val %.4f acc %.3f", tag, epoch,
                     record.train_loss[-1], val["loss"], val["accuracy"])
            if stopper.update(val["loss"]):
                best = mdl.snapshot(model)
            record.stopped_epoch = epoch
            if stopper.should_stop:
                break
        mdl.restore(model, best)
        record.best_epoch = stopper.best_epoch
        if dataset.get("test"):
            test = evaluate_split(model, dataset["test"], cfg.eval_batch)
            record.test = {"accuracy": test["accuracy"], "loss": test["loss"],
                           "predictions": test["predictions"], "labels": test["labels"],
                           "subjects": test["subjects"],
                           "val_accuracy": record.val_accuracy[stopper.best_epoch - 1]}
    return model, record


def train_single_stream(stream, dataset, cfg=TrainConfig()):
    """Fine-tune one view's encoder + BLSTM + head end to end at ``lr_single``.

    ``dataset`` maps split name to a list of :class:`~mvlipread.data.Example`.
    The stream is updated in place, restored to its best validation epoch and
    returned with the run record.
    """
    if stream.head is None:
        raise InvalidArgument("single-stream training needs a softmax head")
    for split, exs in dataset.items():
        if exs and stream.view not in exs[0].frames:
            raise InvalidArgument(f"{split} split lacks view {stream.view}")
    return _fit(stream, dataset, cfg, cfg.lr_single, f"stream{stream.view}")


def train_multiview(model, dataset, cfg=TrainConfig()):
    """Jointly fine-tune streams, fusion BLSTM and head at ``lr_fusion``."""
    for split, exs in dataset.items():
        if exs and not set(model.views) <= set(exs[0].frames):
            raise InvalidArgument(f"{split} split lacks some of views {list(model.views)}")
    return _fit(model, dataset, cfg, cfg.lr_fusion, "fusion" + "-".join(map(str, model.views)))
