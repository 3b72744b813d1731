import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpillum import kernels
from dpillum.brdf import brdf_eval
from dpillum.envmap import EnvMapError, direction, texel_solid_angles
from dpillum.geometry import Scene, View, rotation_y
from dpillum.render import (
    LinearRender,
    MaterialMaps,
    NoObservation,
    NormalizationError,
    RenderOptions,
    global_median_normalize,
    render,
    render_loss_and_grads,
)

from conftest import observe, small_sphere_scene


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# -- BRDF ----------------------------------------------------------------------

def test_lambertian_at_normal_incidence():
    n = np.array([0.0, 0.0, 1.0])
    f = brdf_eval(np.ones(3), 1.0, 0.0, n, n, n)
    spec = brdf_eval(np.zeros(3), 1.0, 0.0, n, n, n)
    np.testing.assert_allclose(f - spec, 1 / np.pi, rtol=1e-12)
    assert np.all(spec >= 0) and np.all(spec < 0.1)


def test_dielectric_specular_only():
    n = np.array([0.0, 0.0, 1.0])
    wi, wo = unit([0.3, 0.0, 1.0]), unit([-0.3, 0.1, 1.0])
    f = brdf_eval(np.zeros(3), 0.4, 0.0, n, wi, wo)
    # same value for any albedo once the diffuse term is removed
    g = brdf_eval(np.full(3, 0.7), 0.4, 0.0, n, wi, wo) - 0.7 / np.pi
    np.testing.assert_allclose(f, g, rtol=1e-12)
    assert np.ptp(f) == 0.0


def test_below_surface_is_zero():
    n = np.array([0.0, 0.0, 1.0])
    assert np.all(brdf_eval(np.ones(3), 0.5, 0.5, n, unit([0, 1, -0.1]), n) == 0)
    assert np.all(brdf_eval(np.ones(3), 0.5, 0.5, n, n, unit([0, 1, -0.1])) == 0)


def test_white_furnace_bound():
    n = np.array([0.0, 1.0, 0.0])
    H, W = 256, 512
    theta = np.pi * (np.arange(H) + 0.5) / H
    phi = 2 * np.pi * (np.arange(W) + 0.5) / W
    dirs = direction(*np.meshgrid(theta, phi, indexing="ij")).reshape(-1, 3)
    dw = texel_solid_angles(H, W).reshape(-1)
    for wo in (n, unit([0.5, 1.0, 0.0]), unit([1.0, 0.3, 0.2])):
        f = brdf_eval(np.ones(3), 1.0, 0.0, n, dirs, wo)
        cos = np.clip(dirs @ n, 0, None)
        total = np.sum(f * (cos * dw)[:, None], axis=0)
        assert np.all(total <= 1.05)


def test_solid_angles_cover_sphere():
    for H, W in [(8, 16), (16, 32), (7, 5)]:
        assert abs(texel_solid_angles(H, W).sum() - 4 * np.pi) < 1e-6


# -- forward rendering ---------------------------------------------------------

def test_constant_env_white_lambertian():
    scene = small_sphere_scene(n_views=1, n_lat=16, n_lon=32)
    L0 = 1.7
    env = np.full((16, 32, 3), L0)
    mat = MaterialMaps.constant(8, (1, 1, 1), 1.0, 0.0)
    img = render(scene, env, mat, 0, RenderOptions())
    cache = next(iter(scene._cache.values()))
    surf = img.reshape(-1, 3)[cache.pix]
    # the dielectric specular lobe adds energy, so isolate the diffuse part
    spec = render(scene, env, MaterialMaps.constant(8, (0, 0, 0), 1.0, 0.0), 0, RenderOptions()).reshape(-1, 3)[cache.pix]
    np.testing.assert_allclose(surf - spec, L0, rtol=0.02)


def test_zero_env_gives_black(sphere_scene, random_material):
    img = render(sphere_scene, np.zeros((8, 16, 3)), random_material(), 0, RenderOptions())
    np.testing.assert_array_equal(img, 0.0)


def test_background(sphere_scene, random_material):
    img = render(sphere_scene, np.zeros((8, 16, 3)), random_material(), 0, RenderOptions(background=0.25))
    assert img[0, 0, 0] == 0.25


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linearity_and_energy(seed):
    scene = small_sphere_scene(n_views=1)
    r = np.random.default_rng(seed)
    mat = MaterialMaps(r.uniform(0, 1, (8, 8, 3)), r.uniform(0, 1, (8, 8)), r.uniform(0, 1, (8, 8)))
    a, b = r.uniform(0, 3, (8, 16, 3)), r.uniform(0, 3, (8, 16, 3))
    opts = RenderOptions(shadows=bool(seed % 2))
    ra, rb = render(scene, a, mat, 0, opts), render(scene, b, mat, 0, opts)
    rab = render(scene, a + b, mat, 0, opts)
    np.testing.assert_allclose(rab, ra + rb, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(render(scene, 2 * a, mat, 0, opts), 2 * ra)
    assert np.all(ra >= 0)


@pytest.mark.parametrize("k", [1, 3, 8])
def test_env_rotation_matches_rotated_camera(k):
    H, W = 8, 16
    scene = small_sphere_scene(n_views=1, n_lat=8, n_lon=W)
    env = np.random.default_rng(k).uniform(0, 2, (H, W, 3))
    mat = MaterialMaps.constant(4, (0.6, 0.5, 0.4), 0.4, 0.3)
    rotated = render(scene, np.roll(env, k, axis=1), mat, 0, RenderOptions())
    v = scene.views[0]
    R = np.eye(4)
    R[:3, :3] = rotation_y(-2 * np.pi * k / W)
    moved = Scene(scene.mesh, [View(R @ v.pose, v.fx, v.fy, v.cx, v.cy, v.width, v.height)])
    np.testing.assert_allclose(render(moved, env, mat, 0, RenderOptions()), rotated, rtol=1e-10, atol=1e-12)


def test_view_index_error(sphere_scene, random_material):
    with pytest.raises(IndexError):
        render(sphere_scene, np.ones((8, 16, 3)), random_material(), 5, RenderOptions())


def test_invalid_env(sphere_scene, random_material):
    with pytest.raises(EnvMapError):
        render(sphere_scene, -np.ones((8, 16, 3)), random_material(), 0, RenderOptions())


def test_backends_agree(random_material):
    if "cython" not in kernels.available():
        pytest.skip("compiled kernels not built")
    env = np.random.default_rng(0).uniform(0, 2, (8, 16, 3))
    mat = random_material()
    out = {}
    for name in ("python", "cython"):
        scene = observe(small_sphere_scene(), env * 1.1, mat, RenderOptions(shadows=True))
        kernels.use_backend(name)
        try:
            g = render_loss_and_grads(scene, env, mat, None, RenderOptions(shadows=True))
        finally:
            kernels.use_backend("cython")
        out[name] = g
    a, b = out["python"], out["cython"]
    assert a.loss == pytest.approx(b.loss, rel=1e-12)
    for x, y in [(a.env, b.env), (a.albedo, b.albedo), (a.roughness, b.roughness), (a.metallic, b.metallic)]:
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)


# -- gradients -------------------------------------------------------------------

def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def gradient_check(scene, env, mat, opts, h_env=1e-5, h_mat=1e-6):
    g = render_loss_and_grads(scene, env, mat, None, opts)

    def loss(e=env, m=mat):
        return render_loss_and_grads(scene, e, m, None, opts, want_env=False, want_material=False).loss

    fd_env = np.zeros_like(env)
    for idx in np.ndindex(env.shape):
        e1, e2 = env.copy(), env.copy()
        e1[idx] += h_env
        e2[idx] -= h_env
        fd_env[idx] = (loss(e=e1) - loss(e=e2)) / (2 * h_env)
    errs = {"env": _rel(g.env, fd_env)}
    for name in ("albedo", "roughness", "metallic"):
        arr = getattr(mat, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            m1, m2 = mat.copy(), mat.copy()
            getattr(m1, name)[idx] += h_mat
            getattr(m2, name)[idx] -= h_mat
            fd[idx] = (loss(m=m1) - loss(m=m2)) / (2 * h_mat)
        errs[name] = _rel(getattr(g, name), fd)
    return errs


@pytest.mark.parametrize("shadows", [False, True])
def test_gradients_match_finite_differences(random_material, shadows):
    r = np.random.default_rng(7)
    opts = RenderOptions(shadows=shadows)
    mat_true = random_material(seed=1)
    scene = observe(small_sphere_scene(), r.uniform(0.2, 2, (8, 16, 3)), mat_true, opts)
    errs = gradient_check(scene, r.uniform(0.2, 2, (8, 16, 3)), random_material(seed=2), opts)
    assert max(errs.values()) < 1e-3, errs


def test_perfect_fit_zero_loss_and_gradients(sphere_scene, random_material):
    env = np.random.default_rng(1).uniform(0, 1, (8, 16, 3))
    mat = random_material()
    observe(sphere_scene, env, mat)
    g = render_loss_and_grads(sphere_scene, env, mat)
    assert g.loss == 0.0
    for arr in (g.env, g.albedo, g.roughness, g.metallic):
        np.testing.assert_array_equal(arr, 0.0)


def test_masked_pixels_are_ignored(sphere_scene, random_material):
    env = np.random.default_rng(1).uniform(0, 1, (8, 16, 3))
    mat = random_material()
    observe(sphere_scene, env, mat)
    v = sphere_scene.views[0]
    v.observation = v.observation.copy()
    v.observation[:, 8:] += 5.0  # corrupt the right half
    mask = np.ones((16, 16), dtype=bool)
    mask[:, 8:] = False
    v.mask = mask
    g = render_loss_and_grads(sphere_scene, env, mat)
    assert g.loss == 0.0
    np.testing.assert_array_equal(g.env, 0.0)
    for v in sphere_scene.views:
        v.mask = np.zeros((16, 16), dtype=bool)
    g = render_loss_and_grads(sphere_scene, env * 3, mat)
    assert g.loss == 0.0 and not g.env.any() and not g.albedo.any()


def test_missing_observation(sphere_scene, random_material):
    with pytest.raises(NoObservation):
        render_loss_and_grads(sphere_scene, np.ones((8, 16, 3)), random_material())


def test_linear_render_matches_renderer(random_material):
    r = np.random.default_rng(3)
    mat = random_material()
    scene = observe(small_sphere_scene(), r.uniform(0, 2, (8, 16, 3)), mat)
    env = r.uniform(0, 2, (8, 16, 3))
    lin = LinearRender(scene, mat, [0, 1], (8, 16), RenderOptions())
    loss, grad = lin.loss_and_grad(env)
    ref = render_loss_and_grads(scene, env, mat, [0, 1], RenderOptions(), want_material=False)
    assert loss == pytest.approx(ref.loss, rel=1e-10)
    np.testing.assert_allclose(grad, ref.env, rtol=1e-9, atol=1e-12)


def test_threaded_reduction_is_deterministic(monkeypatch, random_material):
    r = np.random.default_rng(4)
    mat = random_material()
    scene = observe(small_sphere_scene(n_views=4), r.uniform(0, 2, (8, 16, 3)), mat)
    env = r.uniform(0, 2, (8, 16, 3))
    monkeypatch.setenv("THREADS", "1")
    a = render_loss_and_grads(scene, env, mat)
    monkeypatch.setenv("THREADS", "4")
    b = render_loss_and_grads(scene, env, mat)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.env, b.env)
    np.testing.assert_array_equal(a.albedo, b.albedo)


# -- normalization and materials ---------------------------------------------

def test_global_median_normalize():
    env = np.random.default_rng(0).uniform(0.1, 3, (4, 8, 3))
    med = float(np.median(env))
    np.testing.assert_array_equal(global_median_normalize(env, med), env)
    np.testing.assert_allclose(global_median_normalize(2 * env, 0.7), global_median_normalize(env, 0.7), rtol=1e-15)
    np.testing.assert_allclose(global_median_normalize(np.full((2, 2, 3), 3.0), 1.5), 1.5)
    with pytest.raises(NormalizationError):
        global_median_normalize(np.zeros((2, 2, 3)), 1.0)


def test_material_clamp():
    m = MaterialMaps(np.full((2, 2, 3), 1.5), np.full((2, 2), -0.1), np.full((2, 2), 0.5))
    m.clamp()
    assert m.albedo.max() == 1.0 and m.roughness.min() == 0.0


def test_render_options_validation():
    with pytest.raises(ValueError):
        RenderOptions(background=-1)
    with pytest.raises(ValueError):
        RenderOptions(texel_subdiv=0)
