import numpy as np
import pytest

from msyolo.data import synth_dataset
from msyolo.trainer import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth20():
    """The 20-image overfit corpus shared across trainer/acceptance tests."""
    return synth_dataset(42, 20, [0.4, 0.3, 0.3], image_size=160)


@pytest.fixture(scope="session")
def overfit_result(synth20):
    """One 300-step desk-scale training run, reused by every test that needs
    a trained model (training takes minutes; run it once per session)."""
    tc = TrainConfig(epochs=150, batch_size=8, imgsz=160, width_scale=0.25,
                     seed=0, max_steps=300, optimizer="adaptive", lr=0.01,
                     warmup_epochs=3)
    return train(synth20, tc)
