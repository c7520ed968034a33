import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from layerlat.denoiser import TINY_PRESET, ToyDenoiser
from layerlat.fileio import save_pgm, save_ppm
from layerlat.train import ShapesConfig, make_scene

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_model():
    return ToyDenoiser(TINY_PRESET)


@pytest.fixture
def scene_dir(tmp_path):
    """A procedural 64x64 scene written to disk: source, background and object masks."""
    scene = make_scene(np.random.default_rng(7), ShapesConfig(min_objects=2, max_objects=2))
    save_ppm(tmp_path / "src.ppm", scene.image)
    save_ppm(tmp_path / "bg.ppm", scene.background)
    for i, m in enumerate(scene.masks):
        save_pgm(tmp_path / f"m{i}.pgm", m)
    return tmp_path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
