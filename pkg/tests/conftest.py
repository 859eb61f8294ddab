import sys

import numpy as np
import pytest

from degprompt.imaging import from_uint8, rng_for, to_uint8
from degprompt.synthetic import make_corpus, make_natural_image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def natural_patch():
    """A fixed 64x64 RGB test patch at 8-bit precision."""
    return from_uint8(to_uint8(make_natural_image(64, rng_for(2024, 0, 7))))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three 96x96 corpus images plus one undersized 40x40 image."""
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root, 3, size=96, seed=5)
    make_corpus(root / "tiny", 1, size=40, seed=6)
    (root / "tiny" / "img_0000.png").rename(root / "zz_tiny.png")
    (root / "tiny").rmdir()
    return root


@pytest.fixture(scope="session")
def sweep_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep_corpus")
    make_corpus(root, 25, size=64, seed=11)
    return root


@pytest.fixture(scope="session")
def sweeps(sweep_corpus, tmp_path_factory):
    """Single-factor sweep manifests, 25 records per interval, keyed by type."""
    from degprompt.dataset import DatasetConfig, build_sweep_dataset

    cfg = DatasetConfig(hr_patch_size=64, global_seed=4)
    return {which: build_sweep_dataset(sweep_corpus, tmp_path_factory.mktemp(f"sweep_{which}"),
                                       cfg, which, 25)
            for which in ("blur", "noise", "jpeg")}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = sorted(getattr(module, "RESULTS", []), key=lambda s: int(s.split()[2].rstrip(":")))
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
