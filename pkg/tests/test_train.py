import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model_config
from mvlipread import ndcore, train
from mvlipread import model as mdl
from mvlipread.errors import InvalidArgument, NumericFailure
from mvlipread.train import AdamState, EarlyStopper, TrainConfig, frame_cross_entropy


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def test_loss_perfect_and_uniform():
    z = np.zeros((4, 10))
    z[:, 7] = 1e4
    loss, _ = frame_cross_entropy(z, 7)
    assert loss == 0.0
    loss, _ = frame_cross_entropy(np.zeros((6, 10)), 2)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_loss_ignores_padded_frames(rng):
    z = rng.normal(size=(3, 5, 10))
    mask = np.arange(5)[None] < np.array([5, 2, 3])[:, None]
    labels = np.array([0, 4, 9])
    l1, d1 = frame_cross_entropy(z, labels, mask)
    z2 = z.copy()
    z2[~mask] = rng.normal(size=(~mask).sum() * 10).reshape(-1, 10) * 100
    l2, d2 = frame_cross_entropy(z2, labels, mask)
    assert l1 == l2 and d1.tobytes() == d2.tobytes()
    assert not d1[~mask].any()


def test_loss_is_utterance_average(rng):
    z = rng.normal(size=(2, 6, 10))
    mask = np.arange(6)[None] < np.array([6, 2])[:, None]
    labels = np.array([3, 1])
    loss, _ = frame_cross_entropy(z, labels, mask)
    each = [frame_cross_entropy(z[k, : mask[k].sum()], labels[k])[0] for k in range(2)]
    assert loss == pytest.approx(np.mean(each), rel=1e-12)


def test_loss_errors():
    with pytest.raises(InvalidArgument):
        frame_cross_entropy(np.zeros((2, 3, 10)), [0, 1], np.array([[True] * 3, [False] * 3]))
    with pytest.raises(InvalidArgument):
        frame_cross_entropy(np.zeros((3, 10)), 10)


# --------------------------------------------------------------------------
# Adam and clipping
# --------------------------------------------------------------------------


def test_adam_first_step():
    p = {"w": np.array([0.5])}
    train.adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.001)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert abs((0.5 - p["w"][0]) - 0.001) < 1e-9


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([0.25, -1.0])}
    train.adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["w"].tolist() == [0.25, -1.0]


def test_adam_two_steps_by_hand():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.3
    p = {"w": np.array([1.0])}
    state = AdamState()
    for _ in range(2):
        train.adam_step(p, {"w": np.array([g])}, state, lr, b1, b2, eps)
    m1, v1 = (1 - b1) * g, (1 - b2) * g * g
    w = 1.0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
    w -= lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    assert p["w"][0] == pytest.approx(w, abs=1e-15)
    assert state.t == 2


def test_adam_shape_mismatch():
    with pytest.raises(InvalidArgument):
        train.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


def test_clip_examples():
    grads = {
        "view/0/blstm/fwd/Wx": np.array([12.0, -12.0, 1.5]),
        "fusion/blstm/bwd/b": np.array([0.5, -4.0]),
        "view/0/enc/0/W": np.array([12.0]),
        "head/W": np.array([-30.0]),
    }
    before = {k: v.copy() for k, v in grads.items()}
    train.clip_lstm_gradients(grads, 5.0)
    assert grads["view/0/blstm/fwd/Wx"].tolist() == [5.0, -5.0, 1.5]
    assert grads["fusion/blstm/bwd/b"].tobytes() == before["fusion/blstm/bwd/b"].tobytes()
    assert grads["view/0/enc/0/W"].tolist() == [12.0]
    assert grads["head/W"].tolist() == [-30.0]
    with pytest.raises(InvalidArgument):
        train.clip_lstm_gradients(grads, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20),
       st.floats(1e-3, 100))
def test_clip_never_flips_sign(values, mag):
    g = np.array(values)
    out = train.clip_lstm_gradients({"fusion/blstm/fwd/Wh": g.copy()}, mag)["fusion/blstm/fwd/Wh"]
    assert np.all(np.sign(out) == np.sign(g))
    assert np.all(np.abs(out) <= mag)


# --------------------------------------------------------------------------
# early stopping
# --------------------------------------------------------------------------


def test_early_stopper_trace():
    assert train.early_stopper([3, 2, 1, 1.1, 1.2, 1.3, 1.4, 1.5], 5) == (True, 3, 8)


def test_early_stopper_decreasing_never_stops():
    assert train.early_stopper(list(np.linspace(5, 1, 50)), 5) == (False, 50, None)


def test_early_stopper_plateau_counts():
    assert train.early_stopper([2, 1, 1, 1, 1, 1, 1], 5) == (True, 2, 7)
    es = EarlyStopper(2)
    assert es.update(1.0) and not es.update(1.0) and not es.update(1.0)
    assert es.should_stop and es.best_epoch == 1


def test_early_stopper_scripted_overfitting():
    # validation loss falls, bottoms out at epoch 12, then rises
    hist = [1.0 / (k + 1) for k in range(12)] + [0.09 + 0.01 * k for k in range(20)]
    stop, best, at = train.early_stopper(hist, 5)
    assert stop and best == 12 and at == 17 and at - best == 5


def test_early_stopper_delay_validation():
    with pytest.raises(InvalidArgument):
        EarlyStopper(0)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr_single, c.lr_fusion, c.batch_utterances, c.early_stop_delay, c.clip_magnitude) == \
        (0.0003, 0.0001, 10, 5, 5.0)
    assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)
    with pytest.raises(InvalidArgument):
        TrainConfig(early_stop_delay=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(lr_single=-1.0)


# --------------------------------------------------------------------------
# training procedures
# --------------------------------------------------------------------------


def _stream(view=0, seed=0, precision=32):
    cfg = tiny_model_config(views=(view,), precision=precision)
    return mdl.build_stream(cfg, view, None, ndcore.make_rng(seed, view))


def test_lr_zero_leaves_stream_unchanged(tiny_dataset):
    s = _stream()
    before = mdl.snapshot(s)
    _, rec = train.train_single_stream(s, tiny_dataset, TrainConfig(lr_single=0.0, max_epochs=3))
    assert all(mdl.named_params(s)[k].tobytes() == v.tobytes() for k, v in before.items())
    assert len(set(rec.val_loss)) == 1 and len(set(rec.val_accuracy)) == 1


def test_identical_seeds_identical_records(tiny_dataset):
    recs = []
    for _ in range(2):
        s, rec = train.train_single_stream(_stream(), tiny_dataset, TrainConfig(max_epochs=4, seed=3))
        recs.append((rec.to_jsonl(), mdl.snapshot(s)))
    assert recs[0][0] == recs[1][0]
    assert all(recs[0][1][k].tobytes() == recs[1][1][k].tobytes() for k in recs[0][1])


def test_best_weights_restored(tiny_dataset):
    s, rec = train.train_single_stream(_stream(precision=64), tiny_dataset,
                                       TrainConfig(lr_single=0.01, max_epochs=12, early_stop_delay=2))
    assert 1 <= rec.best_epoch <= rec.stopped_epoch
    if rec.stopped_epoch < 12:
        assert rec.stopped_epoch - rec.best_epoch == 2
    val = train.evaluate_split(s, tiny_dataset["val"])
    assert val["loss"] == pytest.approx(rec.val_loss[rec.best_epoch - 1], rel=1e-12)
    assert rec.val_loss[rec.best_epoch - 1] == min(rec.val_loss)


def test_partial_batch_kept(tiny_dataset, monkeypatch):
    sizes = []
    real = train.loss_and_grads

    def spy(model, batches, labels):
        sizes.append(len(labels))
        return real(model, batches, labels)

    monkeypatch.setattr(train, "loss_and_grads", spy)
    n = len(tiny_dataset["train"])
    train.train_single_stream(_stream(), tiny_dataset, TrainConfig(max_epochs=1, batch_utterances=7))
    assert sum(sizes) == n and len(sizes) == math.ceil(n / 7)


def test_shuffle_differs_per_epoch(tiny_dataset, monkeypatch):
    orders = []
    real = train.loss_and_grads

    def spy(model, batches, labels):
        orders.append(tuple(labels))
        return real(model, batches, labels)

    monkeypatch.setattr(train, "loss_and_grads", spy)
    train.train_single_stream(_stream(), tiny_dataset, TrainConfig(max_epochs=2, batch_utterances=100))
    assert len(orders) == 2 and orders[0] != orders[1] and sorted(orders[0]) == sorted(orders[1])


def test_run_record_jsonl(tiny_dataset):
    _, rec = train.train_single_stream(_stream(), tiny_dataset, TrainConfig(max_epochs=2))
    lines = [json.loads(l) for l in rec.to_jsonl().splitlines()]
    assert [l["epoch"] for l in lines[:-1]] == [1, 2]
    summary = lines[-1]
    assert summary["summary"] and summary["best_epoch"] <= summary["stopped_epoch"]
    assert summary["config"]["lr"] == 0.0003 and summary["config"]["stage"] == "stream0"
    assert set(summary["test"]) >= {"accuracy", "loss", "predictions", "labels", "subjects", "val_accuracy"}


def test_training_errors(tiny_dataset):
    with pytest.raises(InvalidArgument, match="empty"):
        train.train_single_stream(_stream(), {"train": tiny_dataset["train"], "val": []})
    headless = _stream()
    headless.head = None
    with pytest.raises(InvalidArgument):
        train.train_single_stream(headless, tiny_dataset)
    cfg = tiny_model_config(views=(45,), sizes={45: (6, 8)})
    with pytest.raises(InvalidArgument):
        train.train_single_stream(mdl.build_stream(cfg, 45), tiny_dataset)


def test_numeric_failure_names_epoch_and_batch(tiny_dataset):
    from mvlipread.data import Example

    bad = [Example(e.subject, e.label, e.take, {v: f.copy() for v, f in e.frames.items()})
           for e in tiny_dataset["train"]]
    for e in bad:
        e.frames[0][0, 0] = np.nan
    with pytest.raises(NumericFailure, match="epoch 1 batch 0"):
        train.train_single_stream(_stream(), {"train": bad, "val": tiny_dataset["val"]},
                                  TrainConfig(max_epochs=1))


def test_multiview_lr_zero_equals_frozen_transfer(tiny_dataset):
    cfg = tiny_model_config()
    streams = {v: _stream(v) for v in cfg.views}
    mv = mdl.build_multiview(streams, cfg, ndcore.make_rng(4))
    frozen = train.evaluate_split(mv, tiny_dataset["test"])
    mv, rec = train.train_multiview(mv, tiny_dataset, TrainConfig(lr_fusion=0.0, max_epochs=2))
    assert rec.test["accuracy"] == frozen["accuracy"]
    assert rec.test["predictions"] == frozen["predictions"]


def test_multiview_needs_all_views(tiny_dataset):
    cfg = tiny_model_config(views=(0, 45), sizes={0: (6, 8), 45: (6, 8)})
    mv = mdl.build_multiview({v: mdl.build_stream(cfg, v) for v in cfg.views}, cfg)
    with pytest.raises(InvalidArgument):
        train.train_multiview(mv, tiny_dataset)


def test_small_step_decreases_batch_loss(tiny_dataset):
    # line-search probe: one Adam step at a tiny rate lowers the batch loss
    cfg = tiny_model_config(precision=64)
    mv = mdl.build_multiview({v: mdl.build_stream(cfg, v, None, ndcore.make_rng(1, v)) for v in cfg.views},
                             cfg, ndcore.make_rng(2))
    rng = ndcore.make_rng(0, "probe")
    exs = tiny_dataset["train"]
    ok = total = 0
    for trial in range(20):
        chunk = [exs[i] for i in rng.choice(len(exs), 6, replace=False)]
        batches, labels = train.make_batch(chunk, cfg.views, np.float64)
        for lr in (1e-5, 1e-6):
            base = mdl.snapshot(mv)
            loss0, grads = train.loss_and_grads(mv, batches, labels)
            train.adam_step(mdl.named_params(mv), grads, AdamState(), lr)
            loss1, _ = train.loss_and_grads(mv, batches, labels)
            mdl.restore(mv, base)
            ok += loss1 < loss0
            total += 1
    assert ok / total >= 0.95


def test_predict_majority_vote(tiny_dataset):
    s = _stream()
    preds, loss = train.predict(s, tiny_dataset["test"], batch_size=3)
    assert preds.shape == (len(tiny_dataset["test"]),) and np.isfinite(loss)
    again, loss2 = train.predict(s, tiny_dataset["test"], batch_size=50)
    assert np.array_equal(preds, again) and loss == pytest.approx(loss2, rel=1e-6)
