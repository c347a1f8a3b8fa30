import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deskvln import taskgen
from deskvln.world import Scene

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def open_scene(w=16, h=12, scene_id="open", walls=()):
    grid = np.zeros((h, w), dtype=bool)
    for cx, cy in walls:
        grid[cy, cx] = True
    return Scene(scene_id, grid, [(0, (1, 1)), (1, (w - 2, h - 2))], 0.25)


@pytest.fixture(scope="session")
def small_scenes():
    return taskgen.generate_scenes(11, 3)


@pytest.fixture(scope="session")
def small_episodes(small_scenes):
    return taskgen.generate_episodes(small_scenes, 6, 5)


@pytest.fixture(scope="session")
def scene_map(small_scenes):
    return {s.scene_id: s for s in small_scenes}


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, small_scenes):
    d = tmp_path_factory.mktemp("scenes")
    taskgen.save_scenes(small_scenes, d)
    return d


# -- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records one criterion line for the terminal summary."""
    def record(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
