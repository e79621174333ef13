import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from datta.datagen import SourceTask
from datta.harness import TrainConfig, save_checkpoint, train_source
from datta.model import Model, ModelSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ModelSpec(in_channels=3, image_size=12, channels=(4, 6), kernels=(3, 3), strides=(1, 2), num_classes=5)


def randomize_bn(model, seed):
    """Non-trivial source statistics and affine parameters."""
    rng = np.random.default_rng(seed)
    for st in model.bn:
        c = st.channels
        st.mu_source = rng.normal(0, 0.5, c).astype(np.float32)
        st.var_source = rng.uniform(0.5, 2.0, c).astype(np.float32)
        st.gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
        st.beta = rng.normal(0, 0.3, c).astype(np.float32)
    return model


@pytest.fixture
def tiny_model():
    return randomize_bn(Model.init(TINY, 0), 1)


@pytest.fixture
def tiny_batch():
    return np.random.default_rng(2).random((8, 3, 12, 12)).astype(np.float32)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """The default source checkpoint, trained once per test session."""
    ckpt = train_source(SourceTask(), ModelSpec(), TrainConfig())
    path = tmp_path_factory.mktemp("ckpt") / "source.ckpt"
    save_checkpoint(ckpt, path)
    return ckpt, path


TINY_TASK = SourceTask(num_classes=5, image_shape=(3, 12, 12))
TINY_TRAIN = TrainConfig(epochs=1, n_train=128, batch_size=32, n_heldout=50)


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory):
    """A quickly trained checkpoint of the tiny net, for harness and CLI plumbing."""
    ckpt = train_source(TINY_TASK, TINY, TINY_TRAIN)
    path = tmp_path_factory.mktemp("tiny") / "tiny.ckpt"
    save_checkpoint(ckpt, path)
    return ckpt, path


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
