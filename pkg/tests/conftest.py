import numpy as np
import pytest

from mfmseg import synth
from mfmseg.train import Dataset


def toy_dataset(root, size=32, counts=None, seed=0, min_overlap=5):
    cfg = synth.SynthConfig(size=size, counts=counts or {"train": 8, "val": 4, "test": 4},
                            test_sources=2, min_overlap=min_overlap, seed=seed)
    synth.build_dataset(synth.make_sources(6, 6, size, seed=seed), cfg, root)
    return root


def load(root, split):
    images, labels, recs = synth.load_split(root, split)
    return Dataset(synth.to_input(images), labels, images)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return toy_dataset(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_sets(toy_root):
    return load(toy_root, "train"), load(toy_root, "val")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, at the end of the run."""
    import sys
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
