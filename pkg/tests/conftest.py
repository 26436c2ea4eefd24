import sys

import numpy as np
import pytest

from mvlipread import data, ndcore
from mvlipread import model as mdl


@pytest.fixture(autouse=True)
def _finite_checks():
    old = ndcore.CHECK_FINITE
    ndcore.CHECK_FINITE = True
    yield
    ndcore.CHECK_FINITE = old


@pytest.fixture
def rng():
    return ndcore.make_rng(1234, "test")


TINY_SYNTH = dict(
    views=(0, 90), subjects={"train": 3, "val": 2, "test": 2}, takes=2,
    frame_sizes={0: (6, 8), 90: (8, 6)}, length_range=(4, 7), noise=0.3, seed=5, mode="separable",
)


def tiny_model_config(views=(0, 90), sizes=None, precision=32):
    sizes = sizes or {0: (6, 8), 90: (8, 6)}
    return mdl.ModelConfig(views=views, input_dims={v: sizes[v] for v in views},
                           encoder_sizes=(6, 5, 4), bottleneck_dim=3, stream_hidden=4,
                           fusion_hidden=3, precision=precision)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_synth")
    return data.synth_generate(data.SynthConfig(**TINY_SYNTH), str(out))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_manifest):
    return data.load_examples(tiny_manifest)


def random_batch(rng, B, T, D, lengths=None, dtype=np.float64):
    from mvlipread.net import SequenceBatch

    lengths = np.asarray(lengths if lengths is not None else rng.integers(1, T + 1, B))
    lengths[0] = T
    x = rng.normal(size=(B, T, D)).astype(dtype)
    return SequenceBatch(x, lengths)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
