"""Utterance files, the dataset manifest, preprocessing, subject splits and
the synthetic multi-view generator.

``MVLU`` utterance file (little-endian)::

    offset  size  field
    0       4     magic b"MVLU"
    4       4     u32 version (1)
    8       4     u32 subject
    12      2     u16 label
    14      2     u16 view angle
    16      2     u16 take
    18      4     u32 T (frames)
    22      2     u16 H
    24      2     u16 W
    26      4*T*H*W  float32 frames, row-major (T, H, W)

Manifest: UTF-8 text. ``#``-prefixed header lines (``# mvlu-manifest 1``,
``# view_size <angle> <H> <W>``, ``# meta <key> <value>``) followed by a
tab-separated table with the column header
``path subject label view take split``. Paths are relative to the manifest.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndcore
from .errors import (
    BadMagic,
    DataError,
    InvalidArgument,
    InvalidView,
    TruncatedFile,
    VersionMismatch,
)
from .model import ROI_SIZES, VIEWS, check_view

log = logging.getLogger(__name__)

PHRASES = (
    "Excuse me", "Goodbye", "Hello", "How are you", "Nice to meet you",
    "See you", "I am sorry", "Thank you", "Have a good time", "You are welcome",
)

UTT_MAGIC = b"MVLU"
UTT_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHIHH")
SPLITS = ("train", "val", "test")
COLUMNS = ("path", "subject", "label", "view", "take", "split")


@dataclass
class Utterance:
    subject: int
    label: int
    view: int
    take: int
    frames: np.ndarray  # (T, H, W) float32

    def __post_init__(self):
        check_view(self.view)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise InvalidArgument(f"frames must be (T>=1, H, W), got {self.frames.shape}")


def write_utterance(utt, path):
    T, H, W = utt.frames.shape
    head = _HEADER.pack(UTT_MAGIC, UTT_VERSION, utt.subject, utt.label, utt.view, utt.take, T, H, W)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())


def read_utterance(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != UTT_MAGIC:
        raise BadMagic(path, UTT_MAGIC, bytes(buf[:4]), offset=0)
    if len(buf) < _HEADER.size:
        raise TruncatedFile(path, _HEADER.size, len(buf), "header")
    _, version, subject, label, view, take, T, H, W = _HEADER.unpack_from(buf)
    if version != UTT_VERSION:
        raise VersionMismatch(path, UTT_VERSION, version, offset=4)
    if view not in VIEWS:
        raise InvalidView(path, view)
    expected = _HEADER.size + 4 * T * H * W
    if len(buf) != expected:
        raise TruncatedFile(path, expected, len(buf), "frame data")
    frames = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(T, H, W)
    return Utterance(subject, label, view, take, frames.astype(np.float32))


ZNORM_SCOPES = ("frame", "utterance")


def preprocess(frames, eps=1e-8, scope="frame"):
    """Subtract the utterance mean image, then z-normalise.

    ``scope="frame"`` normalises each frame vector on its own; ``"utterance"``
    uses one mean and std over all frames and pixels, which keeps the relative
    size of frame-to-frame changes. Accepts ``(T, H, W)`` or ``(T, D)`` and
    returns float32 ``(T, H*W)``.
    """
    if scope not in ZNORM_SCOPES:
        raise InvalidArgument(f"unknown z-normalisation scope {scope!r}")
    x = np.asarray(frames, dtype=np.float64).reshape(len(frames), -1)
    x = x - x.mean(axis=0, keepdims=True)
    axis = 1 if scope == "frame" else None
    mu = x.mean(axis=axis, keepdims=True)
    sd = np.maximum(x.std(axis=axis, keepdims=True), eps)
    return ((x - mu) / sd).astype(np.float32)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: int
    label: int
    view: int
    take: int
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list
    view_sizes: dict = field(default_factory=dict)  # angle -> (H, W)
    meta: dict = field(default_factory=dict)
    root: str = "."

    def subjects(self, split=None):
        return sorted({e.subject for e in self.entries if split is None or e.split == split})

    @property
    def views(self):
        return tuple(sorted({e.view for e in self.entries}))

    def split_of(self):
        out = {}
        for e in self.entries:
            if out.setdefault(e.subject, e.split) != e.split:
                raise DataError(f"subject {e.subject} appears in splits {out[e.subject]!r} and {e.split!r}")
        return out

    def validate(self):
        """Hard checks: disjoint splits, unique (subject, label, take) per view."""
        self.split_of()
        seen = set()
        for e in self.entries:
            check_view(e.view)
            if e.split not in ("", *SPLITS):
                raise DataError(f"unknown split {e.split!r} for {e.path}")
            key = (e.view, e.subject, e.label, e.take)
            if key in seen:
                raise DataError(f"duplicate utterance {key}")
            seen.add(key)
        return self

    def count(self, split):
        """Number of utterances in ``split``, counted once across views."""
        return len({(e.subject, e.label, e.take) for e in self.entries if e.split == split})


def write_manifest(manifest, path):
    lines = ["# mvlu-manifest 1"]
    for v in sorted(manifest.view_sizes):
        H, W = manifest.view_sizes[v]
        lines.append(f"# view_size {v} {H} {W}")
    for k in sorted(manifest.meta):
        lines.append(f"# meta {k} {manifest.meta[k]}")
    lines.append("\t".join(COLUMNS))
    for e in manifest.entries:
        lines.append("\t".join(str(getattr(e, c)) for c in COLUMNS))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    sizes, meta, entries = {}, {}, []
    header_seen = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["view_size"] and len(parts) == 4:
                    sizes[int(parts[1])] = (int(parts[2]), int(parts[3]))
                elif parts[:1] == ["meta"] and len(parts) >= 3:
                    meta[parts[1]] = " ".join(parts[2:])
                continue
            cols = line.split("\t")
            if not header_seen:
                if tuple(cols) != COLUMNS:
                    raise DataError(f"{path}:{lineno}: expected column header {COLUMNS}")
                header_seen = True
                continue
            if len(cols) not in (5, 6):
                raise DataError(f"{path}:{lineno}: malformed row {line!r}")
            try:
                entries.append(ManifestEntry(
                    cols[0], int(cols[1]), int(cols[2]), int(cols[3]), int(cols[4]),
                    cols[5] if len(cols) == 6 else ""))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row {line!r}") from None
    m = DatasetManifest(entries, sizes, meta, os.path.dirname(os.path.abspath(path)))
    return m.validate()


def split_subjects(manifest, n_train=35, n_val=5, n_test=12, seed=0):
    """Assign subjects to train/val/test.

    Subjects already flagged ``test`` in the manifest stay the test set;
    otherwise the test subjects are drawn with the seeded generator too.
    Subjects left over after the requested counts are dropped from every
    split (their split becomes empty).
    """
    subjects = manifest.subjects()
    current = manifest.split_of()
    fixed_test = sorted(s for s in subjects if current[s] == "test")
    if fixed_test and len(fixed_test) != n_test:
        raise InvalidArgument(f"manifest flags {len(fixed_test)} test subjects, expected {n_test}")
    need = n_train + n_val + (0 if fixed_test else n_test)
    pool = [s for s in subjects if s not in fixed_test]
    if len(pool) < need:
        raise InvalidArgument(
            f"{len(subjects)} subjects cannot fill splits of {n_train}/{n_val}/{n_test}"
        )
    rng = ndcore.make_rng(seed, "split")
    order = [pool[i] for i in rng.permutation(len(pool))]
    test = fixed_test or order[:n_test]
    rest = order if fixed_test else order[n_test:]
    assign = {s: "" for s in subjects}
    assign.update({s: "test" for s in test})
    assign.update({s: "train" for s in rest[:n_train]})
    assign.update({s: "val" for s in rest[n_train : n_train + n_val]})
    entries = [replace(e, split=assign[e.subject]) for e in manifest.entries]
    return replace(manifest, entries=entries).validate()


# --------------------------------------------------------------------------
# in-memory examples
# --------------------------------------------------------------------------


@dataclass
class Example:
    """One utterance across views, preprocessed to ``(T, H*W)`` per view."""

    subject: int
    label: int
    take: int
    frames: dict  # angle -> (T, D) float32

    @property
    def length(self):
        return len(next(iter(self.frames.values())))


def load_examples(manifest, views=None, splits=SPLITS, znorm="frame"):
    """Read, preprocess and group utterances by ``(subject, label, take)``."""
    views = tuple(views) if views is not None else manifest.views
    grouped = {}
    for e in manifest.entries:
        if e.view not in views or e.split not in splits:
            continue
        path = e.path if os.path.isabs(e.path) else os.path.join(manifest.root, e.path)
        if not os.path.exists(path):
            raise DataError(f"missing utterance file for manifest row {_row(e)}")
        utt = read_utterance(path)
        if (utt.subject, utt.label, utt.view, utt.take) != (e.subject, e.label, e.view, e.take):
            raise DataError(f"file header disagrees with manifest row {_row(e)}")
        size = manifest.view_sizes.get(e.view)
        if size is not None and utt.frames.shape[1:] != tuple(size):
            raise DataError(f"frame size {utt.frames.shape[1:]} != declared {size} in row {_row(e)}")
        key = (e.split, e.subject, e.label, e.take)
        grouped.setdefault(key, {})[e.view] = preprocess(utt.frames, scope=znorm)
    out = {s: [] for s in splits}
    for (split, subject, label, take), frames in sorted(grouped.items()):
        missing = [v for v in views if v not in frames]
        if missing:
            raise DataError(
                f"utterance subject={subject} label={label} take={take} lacks views {missing}"
            )
        lengths = {v: len(f) for v, f in frames.items()}
        if len(set(lengths.values())) != 1:
            raise DataError(
                f"utterance subject={subject} label={label} take={take}: frame counts differ {lengths}"
            )
        out[split].append(Example(subject, label, take, {v: frames[v] for v in views}))
    return out


def _row(e):
    return "\t".join(str(getattr(e, c)) for c in COLUMNS)


# --------------------------------------------------------------------------
# synthetic multi-view data
# --------------------------------------------------------------------------

# view angle -> latent channel rendered (0: opening height, 1: protrusion width)
DEFAULT_VIEW_CHANNELS = {0: 0, 30: 0, 45: 1, 60: 0, 90: 1}


@dataclass
class SynthConfig:
    views: tuple = (0, 90)
    mode: str = "complementary"  # or "separable"
    num_classes: int = 10
    subjects: dict = field(default_factory=lambda: {"train": 20, "val": 4, "test": 6})
    takes: int = 3
    frame_scale: float = 0.5
    frame_sizes: dict = None  # angle -> (H, W); overrides frame_scale
    length_range: tuple = (15, 25)
    view_channels: dict = None
    noise: float = 0.3
    subject_var: float = 0.15
    oracle_frames: int = 12
    seed: int = 0

    def __post_init__(self):
        self.views = tuple(check_view(v) for v in self.views)
        if not self.views:
            raise InvalidArgument("synthetic data needs at least one view")
        if self.mode not in ("complementary", "separable"):
            raise InvalidArgument(f"unknown synthetic mode {self.mode!r}")
        if not 2 <= self.num_classes <= 10:
            raise InvalidArgument("num_classes must be between 2 and 10")
        if self.view_channels is None:
            self.view_channels = {v: DEFAULT_VIEW_CHANNELS[v] for v in self.views}
        self.view_channels = {int(k): int(c) for k, c in self.view_channels.items()}
        if self.mode == "complementary":
            if len(self.views) < 2:
                raise InvalidArgument("complementary mode needs at least two views")
            if {self.view_channels[v] for v in self.views} != {0, 1}:
                raise InvalidArgument("complementary mode needs views rendering both channels")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise InvalidArgument(f"bad length range {self.length_range}")
        if self.noise < 0 or self.subject_var < 0:
            raise InvalidArgument("noise levels must be non-negative")

    def frame_size(self, view):
        if self.frame_sizes and view in self.frame_sizes:
            return tuple(self.frame_sizes[view])
        H, W = ROI_SIZES[view]
        return max(4, round(H * self.frame_scale)), max(4, round(W * self.frame_scale))


def class_patterns(mode, label):
    """Pattern index (0..9) of each latent channel for a class.

    Separable: both channels carry a class-unique pattern. Complementary:
    each channel alone takes one of 5 patterns shared by two classes, and
    only the pair identifies the class.
    """
    if mode == "separable":
        return label, label
    return 2 * (label % 5), 2 * ((label // 2) % 5) + 1


def pattern_curve(pattern, u, phase=0.0):
    freq = 0.5 * (1 + pattern // 2)
    sign = 1.0 if pattern % 2 == 0 else -1.0
    return sign * np.sin(2 * np.pi * freq * u + phase)


def render_view(traj, size, channel, subj, rng, noise):
    """Draw a dark ellipse whose height (channel 0) or width (channel 1) follows ``traj``."""
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 + subj["dy"] * H
    cx = W / 2 + subj["dx"] * W
    ry0 = 0.22 * H * subj["scale"]
    rx0 = 0.30 * W * subj["scale"]
    frames = np.empty((len(traj), H, W))
    for t, a in enumerate(traj):
        ry = ry0 * (1 + 0.45 * a) if channel == 0 else ry0
        rx = rx0 * (1 + 0.35 * a) if channel == 1 else rx0
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        mouth = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / 0.08, -50, 50)))
        frames[t] = subj["background"] - subj["contrast"] * mouth
    frames += subj["texture"][:H, :W]
    if noise > 0:
        frames += rng.normal(0, noise, frames.shape)
    return frames.astype(np.float32)


def synth_generate(cfg, out_dir):
    """Write a synthetic multi-view dataset and its manifest to ``out_dir``.

    The nearest-template oracle accuracies (per view and for the union of
    views) are computed on the written data and stored in the manifest meta.
    """
    os.makedirs(os.path.join(out_dir, "utterances"), exist_ok=True)
    rng = ndcore.make_rng(cfg.seed, "synth")
    sizes = {v: cfg.frame_size(v) for v in cfg.views}
    max_hw = (max(s[0] for s in sizes.values()), max(s[1] for s in sizes.values()))
    entries = []
    subject_id = 0
    lo, hi = cfg.length_range
    for split in SPLITS:
        for _ in range(int(cfg.subjects.get(split, 0))):
            sv = cfg.subject_var
            subj = {
                "dy": rng.normal(0, 0.05 * sv), "dx": rng.normal(0, 0.05 * sv),
                "scale": 1 + rng.normal(0, sv),
                "background": 0.6 + rng.normal(0, sv), "contrast": 0.5 * (1 + rng.normal(0, sv)),
                "texture": rng.normal(0, sv, max_hw),
            }
            subj["scale"] = max(subj["scale"], 0.5)
            for label in range(cfg.num_classes):
                pats = class_patterns(cfg.mode, label)
                for take in range(cfg.takes):
                    T = int(rng.integers(lo, hi + 1))
                    u = np.linspace(0.0, 1.0, T)
                    trajs = [
                        (1 + rng.normal(0, 0.1 * cfg.noise))
                        * pattern_curve(p, u, rng.normal(0, 0.15 * cfg.noise))
                        for p in pats
                    ]
                    for v in cfg.views:
                        ch = cfg.view_channels[v]
                        frames = render_view(trajs[ch], sizes[v], ch, subj, rng, cfg.noise)
                        rel = os.path.join("utterances", f"s{subject_id:03d}_l{label}_t{take}_v{v}.mvlu")
                        write_utterance(Utterance(subject_id, label, v, take, frames),
                                        os.path.join(out_dir, rel))
                        entries.append(ManifestEntry(rel, subject_id, label, v, take, split))
            subject_id += 1
    manifest = DatasetManifest(entries, sizes, {}, os.path.abspath(out_dir)).validate()
    oracle = template_oracle(manifest, cfg.views, cfg.oracle_frames)
    manifest.meta = {
        "mode": cfg.mode, "seed": cfg.seed, "noise": cfg.noise,
        **{f"oracle_view_{v}": f"{acc:.6f}" for v, acc in oracle["views"].items()},
        "oracle_union": f"{oracle['union']:.6f}",
    }
    if cfg.mode == "complementary" and any(oracle["union"] < a for a in oracle["views"].values()):
        raise DataError(f"union-of-views oracle below a single view: {oracle}")
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    log.info("synthetic dataset written to %s (oracle %s)", out_dir, oracle)
    return manifest


def _resample(seq, n):
    """Linear interpolation of a ``(T, D)`` sequence onto ``n`` evenly spaced times."""
    T = len(seq)
    if T == 1:
        return np.repeat(seq, n, axis=0)
    pos = np.linspace(0, T - 1, n)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return seq[lo] * (1 - w) + seq[hi] * w


def template_oracle(manifest, views, n_frames=12):
    """Nearest-class-mean accuracy on the test split, per view and for the union.

    Templates come from the train split. Returns
    ``{"views": {angle: acc}, "union": acc}``.
    """
    ex = load_examples(manifest, views, splits=("train", "test"))
    if not ex["train"] or not ex["test"]:
        return {"views": {v: math.nan for v in views}, "union": math.nan}

    def feats(e, vs):
        return np.concatenate([_resample(e.frames[v].astype(np.float64), n_frames).ravel() for v in vs])

    def score(vs):
        X = np.stack([feats(e, vs) for e in ex["train"]])
        y = np.array([e.label for e in ex["train"]])
        classes = np.unique(y)
        templates = np.stack([X[y == c].mean(axis=0) for c in classes])
        correct = 0
        for e in ex["test"]:
            d = ((templates - feats(e, vs)) ** 2).sum(axis=1)
            correct += int(classes[np.argmin(d)] == e.label)
        return correct / len(ex["test"])

    return {"views": {v: score((v,)) for v in views}, "union": score(tuple(views))}
