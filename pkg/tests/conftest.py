import numpy as np
import pytest

from splatsim.example import make_example_scene
from splatsim.rasterize import RenderConfig, render_sequence


@pytest.fixture(scope="session")
def example_scene():
    return make_example_scene(0)


@pytest.fixture(scope="session")
def example_render(example_scene):
    return render_sequence(example_scene)


@pytest.fixture(scope="session")
def small_scene():
    """Quarter-size variant for the slower optimization/diffusion paths."""
    return make_example_scene(seed=1, n_frames=4, width=32, height=24)


@pytest.fixture(scope="session")
def small_render(small_scene):
    return render_sequence(small_scene)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
