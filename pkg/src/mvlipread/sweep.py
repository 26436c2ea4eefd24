"""View-combination sweeps: repeated runs per subset of views, aggregated
into mean/std/max tables with significance against the frontal view.

Each run trains one stream per view once (RBM pretraining followed by
single-stream training) and reuses it for every subset containing that
view. Single-view subsets report the stream itself; larger subsets build
and fine-tune a fused model on top of copies of the cached streams.

Report files written to the output directory (stable column order):

``report.txt``
    whitespace-aligned table ``views runs mean std max_test max_val sig welch_p mw_p``
``report.json``
    every field of :class:`SweepReport`, keys sorted
``confusion_<views>.csv``
    10x10 counts of the best-by-test run, true class on rows
``per_subject_<views>.csv``
    ``subject,mean,std`` over runs
"""

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as mdl
from . import ndcore
from .errors import InvalidArgument, MvlError
from .evaluate import confusion_matrix, per_subject_accuracy, run_stats, significance_test
from .model import VIEWS, ModelConfig
from .rbm import CdConfig, pretrain_stack
from .train import TrainConfig, train_multiview, train_single_stream

log = logging.getLogger(__name__)


def all_subsets(views=VIEWS):
    """Non-empty subsets ordered by size, then lexicographically."""
    views = tuple(sorted(views))
    return [c for k in range(1, len(views) + 1) for c in itertools.combinations(views, k)]


def subset_name(subset):
    return "+".join(str(v) for v in subset)


@dataclass
class SweepSpec:
    subsets: list = None  # default: every non-empty subset of the dataset's views
    runs: int = 10
    base_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cd: CdConfig = field(default_factory=CdConfig)
    pretrain: bool = True
    jobs: int = 1
    baseline: tuple = (0,)

    def __post_init__(self):
        if self.runs < 1:
            raise InvalidArgument("runs must be >= 1")
        if self.subsets is not None:
            subsets = []
            for s in self.subsets:
                s = tuple(sorted(mdl.check_view(v) for v in s))
                if not s or len(set(s)) != len(s):
                    raise InvalidArgument(f"bad view subset {s}")
                subsets.append(s)
            self.subsets = subsets


@dataclass
class SubsetResult:
    views: tuple
    accuracies: list
    val_accuracies: list
    mean: float
    std: float
    max_test: float
    max_val: float  # test accuracy of the run with the best validation accuracy
    significant: bool = None
    welch_p: float = None
    mannwhitney_p: float = None
    per_subject: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)


@dataclass
class SweepReport:
    rows: list  # SubsetResult

    def row(self, views):
        views = tuple(sorted(views))
        for r in self.rows:
            if r.views == views:
                return r
        raise KeyError(views)

    def to_text(self):
        head = f"{'views':<16}{'runs':>5}{'mean':>9}{'std':>9}{'max_test':>10}{'max_val':>9}{'sig':>5}{'welch_p':>10}{'mw_p':>10}"
        lines = [head]
        for r in self.rows:
            std = "-" if r.std is None else f"{r.std:.4f}"
            sig = "-" if r.significant is None else ("*" if r.significant else "")
            wp = "-" if r.welch_p is None else f"{r.welch_p:.4g}"
            mp = "-" if r.mannwhitney_p is None else f"{r.mannwhitney_p:.4g}"
            lines.append(
                f"{subset_name(r.views):<16}{len(r.accuracies):>5}{r.mean:>9.4f}{std:>9}"
                f"{r.max_test:>10.4f}{r.max_val:>9.4f}{sig:>5}{wp:>10}{mp:>10}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self):
        rows = []
        for r in self.rows:
            d = asdict(r)
            d["views"] = list(r.views)
            d["per_subject"] = {str(k): list(v) for k, v in r.per_subject.items()}
            rows.append(d)
        return json.dumps({"rows": rows}, sort_keys=True, indent=1)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(self.to_text())
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json() + "\n")
        for r in self.rows:
            name = subset_name(r.views)
            with open(os.path.join(out_dir, f"confusion_{name}.csv"), "w") as fh:
                for row in r.confusion:
                    fh.write(",".join(str(c) for c in row) + "\n")
            with open(os.path.join(out_dir, f"per_subject_{name}.csv"), "w") as fh:
                fh.write("subject,mean,std\n")
                for s, (m, sd) in r.per_subject.items():
                    fh.write(f"{s},{m:.6f},{'' if sd is None else f'{sd:.6f}'}\n")


def run_seed(base_seed, run):
    return int(base_seed) * 1000 + int(run)


def _input_dims(spec, dataset, views):
    dims = dict(spec.model.input_dims)
    for v in views:
        D = dataset["train"][0].frames[v].shape[1]
        if v not in dims or dims[v][0] * dims[v][1] != D:
            dims[v] = (1, D)
    return dims


def train_stream(spec, dataset, view, seed, input_dims):
    """RBM pretraining (optional) and single-stream training for one view."""
    cfg = replace(spec.model, views=(view,), input_dims=input_dims)
    pretrained = None
    if spec.pretrain:
        frames = np.concatenate([e.frames[view] for e in dataset["train"]])
        pretrained = pretrain_stack(frames, cfg.layer_sizes(), spec.cd,
                                    ndcore.make_rng(seed, "pretrain", view), cfg.dtype)
    stream = mdl.build_stream(cfg, view, pretrained, ndcore.make_rng(seed, "build", view))
    return train_single_stream(stream, dataset, replace(spec.train, seed=seed))


def _annotate(exc, context):
    exc.args = (f"{context}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]


def _run_one(spec, dataset, subsets, run, out_dir):
    seed = run_seed(spec.base_seed, run)
    views = sorted({v for s in subsets for v in s})
    input_dims = _input_dims(spec, dataset, views)
    ckpt_dir = os.path.join(out_dir, "checkpoints", f"run{run}") if out_dir else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    streams, results = {}, {}
    with ndcore.deterministic(spec.train.deterministic):
        for v in views:
            try:
                stream, rec = train_stream(spec, dataset, v, seed, input_dims)
            except MvlError as exc:
                _annotate(exc, f"view {v}, seed {seed}")
                raise
            streams[v] = (stream, rec)
            if ckpt_dir:
                mdl.save_checkpoint(stream, os.path.join(ckpt_dir, f"stream_{v}.mvlm"))
                with open(os.path.join(ckpt_dir, f"stream_{v}.jsonl"), "w") as fh:
                    fh.write(rec.to_jsonl())
        for subset in subsets:
            if len(subset) == 1:
                rec = streams[subset[0]][1]
            else:
                cfg = replace(spec.model, views=subset, input_dims=input_dims)
                fused = mdl.build_multiview({v: streams[v][0] for v in subset}, cfg,
                                            ndcore.make_rng(seed, "fusion", *subset))
                try:
                    fused, rec = train_multiview(fused, dataset, replace(spec.train, seed=seed))
                except MvlError as exc:
                    _annotate(exc, f"subset {subset_name(subset)}, seed {seed}")
                    raise
                if ckpt_dir:
                    name = subset_name(subset)
                    mdl.save_checkpoint(fused, os.path.join(ckpt_dir, f"fusion_{name}.mvlm"))
                    with open(os.path.join(ckpt_dir, f"fusion_{name}.jsonl"), "w") as fh:
                        fh.write(rec.to_jsonl())
            results[subset] = rec.test
    return results


def sweep(spec, dataset, out_dir=None):
    """Train and evaluate every subset in ``spec`` for ``spec.runs`` runs.

    ``dataset`` maps split name to examples and must contain train, val and
    test. Reports (and checkpoints, when ``out_dir`` is set) are written
    with content that depends only on the sweep settings and the data.
    """
    for split in ("train", "val", "test"):
        if not dataset.get(split):
            raise InvalidArgument(f"sweep needs a non-empty {split} split")
    available = set(dataset["train"][0].frames)
    subsets = spec.subsets or all_subsets(sorted(available))
    missing = sorted({v for s in subsets for v in s} - available)
    if missing:
        raise InvalidArgument(f"dataset lacks views {missing}")
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            futures = [pool.submit(_run_one, spec, dataset, subsets, r, out_dir) for r in range(spec.runs)]
            per_run = [f.result() for f in futures]
    else:
        per_run = [_run_one(spec, dataset, subsets, r, out_dir) for r in range(spec.runs)]
    report = aggregate(subsets, per_run, spec.model.num_classes, spec.baseline)
    if out_dir:
        report.write(out_dir)
    return report


def aggregate(subsets, per_run, num_classes=10, baseline=(0,)):
    """Reduce per-run test results into a :class:`SweepReport`."""
    rows = []
    base_accs = None
    if tuple(baseline) in subsets:
        base_accs = [r[tuple(baseline)]["accuracy"] for r in per_run]
    for subset in subsets:
        tests = [r[subset] for r in per_run]
        accs = [t["accuracy"] for t in tests]
        vals = [t["val_accuracy"] for t in tests]
        mean, std = run_stats(accs)
        best_test = int(np.argmax(accs))
        best_val = int(np.argmax(vals))
        row = SubsetResult(subset, accs, vals, mean, std, accs[best_test], accs[best_val])
        if base_accs is not None and subset != tuple(baseline) and len(accs) >= 3:
            sig = significance_test(accs, base_accs)
            row.significant = sig.significant
            row.welch_p = sig.welch_p
            row.mannwhitney_p = sig.mannwhitney_p
        row.per_subject = per_subject_accuracy(
            [(t["predictions"], t["labels"], t["subjects"]) for t in tests])
        bt = tests[best_test]
        row.confusion = confusion_matrix(bt["predictions"], bt["labels"], num_classes).tolist()
        rows.append(row)
    return SweepReport(rows)
