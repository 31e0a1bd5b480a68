import numpy as np
import pytest

from pfl_lstr.lstr import ModelConfig
from pfl_lstr.memory import MemoryConfig
from pfl_lstr.synth import ClientStyle, generate_client_dataset, split_train_test

# fps=1: 2 work slots, 4 long slots
SMALL_MEM = MemoryConfig(fps=1, work_seconds=2, long_seconds=4)
SMALL_MODEL = ModelConfig(feature_dim=4, embed_dim=8, heads=2, latent_tokens=2, encoder_layers=1,
                          decoder_layers=1, ff_dim=8, long_slots=4, work_slots=2)


@pytest.fixture
def mem_cfg():
    return SMALL_MEM


@pytest.fixture
def model_cfg():
    return SMALL_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_dataset(client_id=0, n=12, seed=0, permutation=(0, 1, 2), fp=0.3, noise=0.1):
    style = ClientStyle(client_id, false_positive_rate=fp, permutation=permutation, noise=noise)
    ds = generate_client_dataset(style, n, seed, SMALL_MODEL.feature_dim,
                                 SMALL_MEM.work_slots + SMALL_MEM.long_slots, SMALL_MEM.fps)
    return split_train_test(ds, 0.5, seed)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
