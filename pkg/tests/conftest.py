import numpy as np
import pytest

from bhvit.data import Dataset, synthetic_images
from bhvit.model import BHViT, ModelConfig

# filled by test_acceptance.report and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


def micro(**overrides) -> BHViT:
    return BHViT(ModelConfig.preset_config("micro", **overrides))


def synthetic_dataset(n: int, seed: int = 0) -> Dataset:
    images, labels = synthetic_images(n, seed=seed)
    return Dataset(images, labels, np.arange(n))


@pytest.fixture(scope="session")
def micro_model():
    model = micro(seed=7)
    model.eval()
    return model
