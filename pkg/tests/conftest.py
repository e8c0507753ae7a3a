import numpy as np
import pytest
import torch
from hypothesis import settings

from dualseg.backbone import BayesianConfig, NetworkSpec
from dualseg.core import HybridLossConfig
from dualseg.heads import HeadSpec
from dualseg.phantom import AugmentationConfig, PhantomConfig, make_dataset
from dualseg.trainer import TrainConfig

settings.register_profile("dualseg", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("dualseg")


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(PhantomConfig(shape=(64, 64, 64)), 2, 2, 1, 2, seed=11)


def tiny_config(side=16, **kw):
    """Narrow networks on small patches so a training step takes well under a second."""
    loss = kw.pop("loss", HybridLossConfig(t_max=10))
    base = dict(steps=4, network=NetworkSpec.tiny(side), heads=HeadSpec.tiny(side),
                bayes=BayesianConfig(passes=2), loss=loss, val_every=2, log_every=1,
                augmentation=AugmentationConfig(jitter=4))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
