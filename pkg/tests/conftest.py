import numpy as np
import pytest

from dpillum.geometry import Scene, make_view, uv_sphere
from dpillum.render import MaterialMaps, RenderOptions, render


def small_sphere_scene(n_views=2, size=16, n_lat=8, n_lon=16):
    mesh = uv_sphere(1.0, n_lat, n_lon)
    views = []
    for k in range(n_views):
        ang = 2 * np.pi * k / n_views
        eye = (3.5 * np.sin(ang), 0.8, 3.5 * np.cos(ang))
        views.append(make_view(eye, (0.0, 0.0, 0.0), size))
    return Scene(mesh, views)


def observe(scene, env, mat, opts=RenderOptions()):
    for i, v in enumerate(scene.views):
        v.observation = render(scene, env, mat, i, opts)
    return scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sphere_scene():
    return small_sphere_scene()


@pytest.fixture
def random_material():
    def make(K=8, seed=0):
        r = np.random.default_rng(seed)
        return MaterialMaps(r.uniform(0.2, 0.8, (K, K, 3)), r.uniform(0.3, 0.8, (K, K)),
                            r.uniform(0.2, 0.8, (K, K)))
    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
                terminalreporter.write_line(line)
