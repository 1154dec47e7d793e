import sys
import os
from pathlib import Path

import numpy as np
import pytest

# Ensure imports like `from cmaxsim.main import main` work when running pytest from the workspace root
ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))
# Ensure current working directory is the repo root so relative test paths work
os.chdir(ROOT)

from cmaxsim.models.schemas import CameraIntrinsics, EventWindow, MotionParams  # noqa: E402
from cmaxsim.services.events_service import random_texture, synth_scene  # noqa: E402

OMEGA_TRUE = MotionParams(0.6, -0.4, 0.9)
WINDOW_EVENTS = 2000


@pytest.fixture(scope="session")
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


@pytest.fixture(scope="session")
def scene(intr):
    rng = np.random.default_rng(7)
    texture = random_texture(400, intr, rng)
    return synth_scene(OMEGA_TRUE, intr, 0.2, texture, rng=rng)


@pytest.fixture(scope="session")
def window(scene) -> EventWindow:
    n = min(WINDOW_EVENTS, len(scene.events))
    part = scene.events.slice(0, n)
    return EventWindow(part, float(part.t[0]), index=0, start=0)


@pytest.fixture(scope="session")
def small_window(scene) -> EventWindow:
    n = min(300, len(scene.events))
    part = scene.events.slice(0, n)
    return EventWindow(part, float(part.t[0]), index=0, start=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
