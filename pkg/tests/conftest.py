import numpy as np
import pytest
import torch

from selftaught.config import TrainConfig
from selftaught.data import generate_synthetic_domain


@pytest.fixture(scope="session")
def small_domain():
    return generate_synthetic_domain(0, classes=range(6), images_per_class=12, texture_family="A", image_size=32)


@pytest.fixture
def small_config():
    return TrainConfig(image_size=32, width=8, queries_per_class=3, episodes=3, val_every=0,
                       rot_hidden=16, images_per_class=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
