import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rsnmt import tensor as T
from rsnmt.data import BOS, EOS, pad_batch
from rsnmt.model import ModelConfig, Recurrent


def tiny_config(stacking=None, V=12, d=8, f=16, h=2, **kw) -> ModelConfig:
    return ModelConfig(V, V, d, f, h, stacking or Recurrent(2), **kw)


def random_batch(rng, n, V, lo=2, hi=6):
    """Padded batch of ``[bos, ..., eos]`` rows with content ids in 4..V-1."""
    seqs = [[BOS] + rng.integers(4, V, size=int(rng.integers(lo, hi + 1))).tolist() + [EOS]
            for _ in range(n)]
    return pad_batch(seqs)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
