import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from pointstyle.scene_io import CameraIntrinsics, CameraPose, CameraView, make_synthetic_scene  # noqa: E402
from pointstyle.text_style import StubEmbedder  # noqa: E402


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def scene4():
    return make_synthetic_scene(dict(n_views=4, n_points=2000, texture="noise"), 7)


@pytest.fixture
def stub():
    return StubEmbedder(0, 64, input_size=32)


@pytest.fixture
def identity_view():
    K = CameraIntrinsics(10.0, 10.0, 8.0, 8.0, 17, 17)
    return CameraView(K, CameraPose(np.eye(3), np.zeros(3)))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
