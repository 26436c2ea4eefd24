"""Command-line entry point.

Every subcommand reads an optional ``key = value`` config file (``--config``),
applies ``--set key=value`` overrides on top, and writes the effective config
to ``<out>/config.txt`` in the same syntax, so a run can be repeated with
``--config <out>/config.txt``.

Keys are ``section.field`` where the section is one of ``model``, ``train``,
``cd``, ``synth``, ``data`` or ``sweep`` and the field mirrors the matching
config class. ``seed`` and ``deterministic`` are top level; the root seed
feeds every random stream of the run. Value syntax:

=============  ==========================================
tuple          ``64,32,16``
map            ``train:20,val:4,test:6``
frame sizes    ``0:29x50,90:44x30``
subsets        ``0;90;0+90``
bool           ``true`` / ``false``
=============  ==========================================

Exit status: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure, 4 gradcheck failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, dataclass, fields

import numpy as np

from . import data, gradcheck, ndcore, sweep
from . import model as mdl
from .errors import DataError, InvalidArgument, MvlError, NumericFailure
from .evaluate import confusion_matrix
from .model import ModelConfig
from .rbm import CdConfig, pretrain_stack
from .train import TrainConfig, evaluate_split, train_multiview, train_single_stream

log = logging.getLogger("mvlipread")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class ConfigError(InvalidArgument):
    code = "config-error"


@dataclass
class DataConfig:
    manifest: str = ""
    views: tuple = ()  # empty: every view in the manifest
    znorm: str = "frame"
    resplit: bool = False  # reassign subjects with split_subjects
    n_train: int = 35
    n_val: int = 5
    n_test: int = 12


@dataclass
class SweepConfig:
    subsets: list = None
    runs: int = 10
    pretrain: bool = True
    jobs: int = 1
    baseline: tuple = (0,)


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "cd": CdConfig,
    "synth": data.SynthConfig,
    "data": DataConfig,
    "sweep": SweepConfig,
}
# derived from the data or the root seed, never set directly
_HIDDEN = {"model.views", "model.input_dims", "train.seed", "train.deterministic", "synth.seed"}
_KINDS = {
    "synth.subjects": "map",
    "synth.view_channels": "map",
    "synth.frame_sizes": "sizes",
    "sweep.subsets": "subsets",
}


# --------------------------------------------------------------------------
# config values
# --------------------------------------------------------------------------


def _kind(key, default):
    if key in _KINDS:
        return _KINDS[key]
    for t, name in ((bool, "bool"), (int, "int"), (float, "float"), (str, "str"), (tuple, "tuple")):
        if isinstance(default, t):
            return name
    raise ConfigError(f"{key}: no value syntax for {type(default).__name__}")


def parse_value(key, text, default):
    text = text.strip()
    kind = _kind(key, default)
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if text.lower() in ("", "none"):
            return None if kind in ("map", "sizes", "subsets") else ()
        if kind == "tuple":
            items = [s.strip() for s in text.split(",")]
            conv = float if any("." in s or "e" in s.lower() for s in items) else int
            return tuple(conv(s) for s in items)
        if kind == "map":
            pairs = (item.split(":") for item in text.split(","))
            return {_key(k): int(v) for k, v in pairs}
        if kind == "sizes":
            out = {}
            for item in text.split(","):
                k, hw = item.split(":")
                h, w = hw.lower().split("x")
                out[int(k)] = (int(h), int(w))
            return out
        if kind == "subsets":
            return [tuple(int(v) for v in s.split("+")) for s in text.split(";")]
    except ValueError:
        pass
    raise ConfigError(f"{key}: cannot parse {text!r} as {kind}")


def _key(k):
    k = k.strip()
    return int(k) if k.lstrip("-").isdigit() else k


def format_value(key, value, default):
    kind = _kind(key, default)
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "tuple":
        return ",".join(str(v) for v in value)
    if kind == "map":
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if kind == "sizes":
        return ",".join(f"{k}:{h}x{w}" for k, (h, w) in value.items())
    if kind == "subsets":
        return ";".join("+".join(str(v) for v in s) for s in value)
    return str(value)


def _defaults():
    out = {"seed": 0, "deterministic": True}
    for section, cls in SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key not in _HIDDEN:
                out[key] = f.default if f.default is not MISSING else getattr(inst, f.name)
    return out


def read_config_text(text, source="<config>"):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(config_path=None, overrides=(), seed=None, deterministic=None):
    """Defaults, then the config file, then ``--set`` pairs, then explicit flags."""
    defaults = _defaults()
    cfg = dict(defaults)
    pairs = []
    if config_path:
        try:
            with open(config_path) as fh:
                pairs += read_config_text(fh.read(), config_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        if k not in defaults:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = parse_value(k, v, defaults[k])
    if seed is not None:
        cfg["seed"] = seed
    if deterministic is not None:
        cfg["deterministic"] = deterministic
    return cfg


def config_text(cfg, header=""):
    defaults = _defaults()
    lines = [f"# {line}\n" for line in header.splitlines()]
    lines += [f"{k} = {format_value(k, cfg[k], defaults[k])}\n" for k in sorted(cfg)]
    return "".join(lines)


def section(cfg, name, **extra):
    """Instantiate the config class of ``name`` from the resolved key map."""
    cls = SECTIONS[name]
    kwargs = {f.name: cfg[f"{name}.{f.name}"] for f in fields(cls) if f"{name}.{f.name}" in cfg}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def write_snapshot(cfg, out_dir, command=""):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(config_text(cfg, command))


# --------------------------------------------------------------------------
# shared steps
# --------------------------------------------------------------------------


def _load_dataset(cfg, views=None, manifest_path=None):
    dc = section(cfg, "data")
    path = manifest_path or dc.manifest
    if not path:
        raise ConfigError("no manifest: pass --manifest or set data.manifest")
    manifest = data.read_manifest(path)
    if dc.resplit:
        manifest = data.split_subjects(manifest, dc.n_train, dc.n_val, dc.n_test, cfg["seed"])
    views = tuple(views or dc.views or manifest.views)
    missing = [v for v in views if v not in manifest.views]
    if missing:
        raise DataError(f"{path}: manifest has no view(s) {missing}")
    dataset = data.load_examples(manifest, views, znorm=dc.znorm)
    return manifest, views, dataset


def _model_config(cfg, manifest, views):
    return section(cfg, "model", views=tuple(views),
                   input_dims={v: manifest.view_sizes[v] for v in views})


def _train_config(cfg):
    return section(cfg, "train", seed=cfg["seed"], deterministic=cfg["deterministic"])


def _write_record(rec, path):
    with open(path, "w") as fh:
        fh.write(rec.to_jsonl())


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, cfg):
    sc = section(cfg, "synth", seed=cfg["seed"])
    manifest = data.synth_generate(sc, args.out)
    for k, v in sorted(manifest.meta.items()):
        print(f"{k}\t{v}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    manifest, views, dataset = _load_dataset(cfg, args.views, args.manifest)
    mc = _model_config(cfg, manifest, views)
    cd = section(cfg, "cd")
    encoders = {}
    with ndcore.deterministic(cfg["deterministic"]):
        for v in views:
            frames = np.concatenate([e.frames[v] for e in dataset["train"]])
            encoders[v] = pretrain_stack(frames, mc.layer_sizes(), cd,
                                         ndcore.make_rng(cfg["seed"], "pretrain", v), mc.dtype)
            log.info("pretrained view %d", v)
    path = os.path.join(args.out, "encoder.mvlm")
    mdl.save_checkpoint(encoders, path)
    print(path)
    return EXIT_OK


def cmd_train(args, cfg):
    manifest, views, dataset = _load_dataset(cfg, [args.view], args.manifest)
    mc = _model_config(cfg, manifest, views)
    pretrained = None
    if args.pretrained:
        encoders = mdl.load_checkpoint(args.pretrained)
        if not isinstance(encoders, dict) or args.view not in encoders:
            raise ConfigError(f"{args.pretrained} holds no encoder for view {args.view}")
        pretrained = encoders[args.view]
    stream = mdl.build_stream(mc, args.view, pretrained, ndcore.make_rng(cfg["seed"], "build", args.view))
    stream, rec = train_single_stream(stream, dataset, _train_config(cfg))
    mdl.save_checkpoint(stream, os.path.join(args.out, f"stream_{args.view}.mvlm"))
    _write_record(rec, os.path.join(args.out, f"stream_{args.view}.jsonl"))
    print(f"view {args.view}: best epoch {rec.best_epoch}, test accuracy {rec.test.get('accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_fuse(args, cfg):
    streams = {}
    for path in args.streams:
        s = mdl.load_checkpoint(path)
        if not isinstance(s, mdl.StreamParams):
            raise ConfigError(f"{path} is not a single-stream checkpoint")
        if s.view in streams:
            raise ConfigError(f"two stream checkpoints for view {s.view}")
        streams[s.view] = s
    views = tuple(sorted(streams))
    if len(views) < 2:
        raise ConfigError("fuse needs stream checkpoints for at least two views")
    manifest, views, dataset = _load_dataset(cfg, views, args.manifest)
    mc = _model_config(cfg, manifest, views)
    fused = mdl.build_multiview(streams, mc, ndcore.make_rng(cfg["seed"], "fusion", *views))
    fused, rec = train_multiview(fused, dataset, _train_config(cfg))
    name = sweep.subset_name(views)
    mdl.save_checkpoint(fused, os.path.join(args.out, f"fusion_{name}.mvlm"))
    _write_record(rec, os.path.join(args.out, f"fusion_{name}.jsonl"))
    print(f"views {name}: best epoch {rec.best_epoch}, test accuracy {rec.test.get('accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    model = mdl.load_checkpoint(args.checkpoint)
    if isinstance(model, dict):
        raise ConfigError(f"{args.checkpoint} holds encoders only; evaluate a stream or fused model")
    if isinstance(model, mdl.StreamParams) and model.head is None:
        raise ConfigError(f"{args.checkpoint}: stream has no softmax head")
    _, _, dataset = _load_dataset(cfg, model.views, args.manifest)
    examples = dataset.get(args.split)
    if not examples:
        raise DataError(f"split {args.split!r} is empty")
    with ndcore.deterministic(cfg["deterministic"]):
        res = evaluate_split(model, examples)
    num_classes = model.head.W.shape[1]
    cm = confusion_matrix(res["predictions"], res["labels"], num_classes)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump({"checkpoint": os.path.abspath(args.checkpoint), "split": args.split,
                   "accuracy": res["accuracy"], "loss": res["loss"], "count": len(examples)},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    np.savetxt(os.path.join(args.out, "confusion.csv"), cm, fmt="%d", delimiter=",")
    print(f"{args.split} accuracy {res['accuracy']:.4f} loss {res['loss']:.4f} ({len(examples)} utterances)")
    return EXIT_OK


def cmd_sweep(args, cfg):
    manifest, views, dataset = _load_dataset(cfg, None, args.manifest)
    sc = section(cfg, "sweep")
    if args.runs is not None:
        sc.runs = args.runs
    if args.jobs is not None:
        sc.jobs = args.jobs
    cfg["sweep.runs"], cfg["sweep.jobs"] = sc.runs, sc.jobs
    spec = sweep.SweepSpec(
        subsets=sc.subsets or sweep.all_subsets(views), runs=sc.runs, base_seed=cfg["seed"],
        model=_model_config(cfg, manifest, views), train=_train_config(cfg),
        cd=section(cfg, "cd"), pretrain=sc.pretrain, jobs=sc.jobs, baseline=tuple(sc.baseline),
    )
    write_snapshot(cfg, args.out, args.command_line)
    report = sweep.sweep(spec, dataset, args.out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    results = gradcheck.run_suite(args.trials, cfg["seed"])
    ok = True
    for r in results:
        status = "ok" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{r.name:<16} max_rel_error {r.max_rel_error:.3e} over {r.trials} trials  {status}")
    worst = max(r.max_rel_error for r in results)
    print(f"max rel. error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "fuse": cmd_fuse,
    "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="single-threaded BLAS for bitwise reproducibility (default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="mvlipread", description="Multi-view lipreading experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-view dataset")
    s = sub.add_parser("pretrain", parents=[common], help="RBM-pretrain the encoder of each view")
    s.add_argument("--manifest")
    s.add_argument("--views", type=int, nargs="+")
    s = sub.add_parser("train", parents=[common], help="train one single-view stream")
    s.add_argument("--manifest")
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--pretrained", help="encoder checkpoint from 'pretrain'")
    s = sub.add_parser("fuse", parents=[common], help="fuse and fine-tune trained streams")
    s.add_argument("--manifest")
    s.add_argument("--streams", nargs="+", required=True, help="stream checkpoints from 'train'")
    s = sub.add_parser("eval", parents=[common], help="score a stream or fused checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=data.SPLITS)
    s = sub.add_parser("sweep", parents=[common], help="repeated runs over view subsets")
    s.add_argument("--manifest")
    s.add_argument("--runs", type=int)
    s.add_argument("--jobs", type=int, help="parallel runs")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-5)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed, args.deterministic)
        if getattr(args, "manifest", None):
            cfg["data.manifest"] = args.manifest
        args.command_line = "mvlipread " + " ".join(argv if argv is not None else sys.argv[1:])
        if args.command != "sweep":
            write_snapshot(cfg, args.out, args.command_line)
        return COMMANDS[args.command](args, cfg)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except (MvlError, ValueError) as exc:
        print(f"error [{getattr(exc, 'code', 'invalid-argument')}]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
