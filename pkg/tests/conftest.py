import numpy as np
import pytest

from minivla.model import Model, ModelConfig
from minivla.pipeline import Engine, InferenceRequest, straight_history
from minivla.scenario import procedural_frames


@pytest.fixture(scope="session")
def model():
    return Model(ModelConfig())


@pytest.fixture(scope="session")
def small_frames():
    # 28x28 frames give 4 patches per frame, which keeps engine tests quick
    return procedural_frames(seed=3, height=28, width=28)


@pytest.fixture()
def engine(model):
    return Engine(model=model)


@pytest.fixture()
def make_request(small_frames):
    def make(**kw):
        kw.setdefault("max_new_tokens", 6)
        return InferenceRequest(small_frames, straight_history(5.0), **kw)
    return make


def random_kv(rng, batch, tokens, kv_dim):
    return (rng.standard_normal((batch, tokens, kv_dim)).astype(np.float32),
            rng.standard_normal((batch, tokens, kv_dim)).astype(np.float32))


# (criterion number, line) pairs filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
