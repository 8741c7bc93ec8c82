import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cdfss.episodes import DEFAULT_SOURCE, DEFAULT_TARGET, EpisodeDataset, forge_arrays, sample_episode  # noqa: E402
from cdfss.segmenter import FewShotSegmenter, ModelConfig  # noqa: E402
from cdfss.trainer import TrainConfig, evaluate, train  # noqa: E402


@pytest.fixture(scope="session")
def ds32():
    return EpisodeDataset(forge_arrays(DEFAULT_SOURCE, DEFAULT_TARGET, 20, 32), 32)


@pytest.fixture(scope="session")
def ds16():
    return EpisodeDataset(forge_arrays(DEFAULT_SOURCE, DEFAULT_TARGET, 8, 16), 16)


@pytest.fixture
def model16():
    return FewShotSegmenter(ModelConfig(image_size=16))


@pytest.fixture
def episode16(ds16):
    return sample_episode(ds16, "source", 1, 3)


@pytest.fixture(scope="session")
def trained_run(ds32, tmp_path_factory):
    """Default-configuration end-to-end run: untrained baseline, 10x100 training, re-evaluation."""
    out = tmp_path_factory.mktemp("trained")
    model = FewShotSegmenter(ModelConfig())
    before = evaluate(model, ds32, "target", 200, 1, 7)
    start = time.perf_counter()
    result = train(model, ds32, TrainConfig(seed=42, epochs=10, episodes_per_epoch=100), out)
    seconds = time.perf_counter() - start
    after = evaluate(model, ds32, "target", 200, 1, 7)
    return {"model": model, "train": result, "before": before, "after": after, "dir": out, "train_seconds": seconds}


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k)):
            terminalreporter.write_line(RESULTS[key])


def rng(seed=0):
    return np.random.default_rng(seed)
