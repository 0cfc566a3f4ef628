import numpy as np
import pytest

from sktcount import autodiff as ad
from sktcount.autodiff import Tensor
from sktcount.density import synth_dataset
from sktcount.models import FeatureGroup, build_network, scale_config, toy_config
from sktcount.train import TrainConfig, train_teacher

# toy tap shapes at 16x16 input: strides 1, 2, 4, 8, 8, 8
TOY_TAP_CHANNELS = (8, 16, 24, 32, 32, 16)
TOY_TAP_SIZES = (16, 8, 4, 2, 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_group(seed, channels=TOY_TAP_CHANNELS, sizes=TOY_TAP_SIZES, dtype=np.float64, nonneg=False, grad=False):
    r = np.random.default_rng(seed)
    feats = []
    for c, s in zip(channels, sizes):
        a = r.standard_normal((1, c, s, s))
        if nonneg:
            a = np.abs(a)
        feats.append(Tensor(a.astype(dtype), requires_grad=grad))
    return FeatureGroup(feats, "teacher-T")


@pytest.fixture(scope="session")
def toy():
    return toy_config()


@pytest.fixture(scope="session")
def toy_quarter(toy):
    return scale_config(toy, "1/4")


@pytest.fixture(scope="session")
def tiny_data():
    return synth_dataset(11, 6, 32, 32, (3, 12))


@pytest.fixture(scope="session")
def tiny_teacher(toy, tiny_data):
    """A toy teacher trained briefly on the tiny dataset (shared, read-only)."""
    return train_teacher(TrainConfig(seed=0, epochs=2, learning_rate=1e-3), toy, tiny_data)


@pytest.fixture
def toy_net(toy):
    return build_network(toy, seed=0)


@pytest.fixture(autouse=True)
def _grad_mode_reset():
    yield
    assert ad.is_grad_enabled()


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
