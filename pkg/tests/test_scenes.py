import numpy as np
import pytest

from dpillum.render import render
from dpillum.scenes import BUNDLED, SceneError, build_bundled, load_bundled, load_scene, save_scene


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scene_loads_and_rerenders(name):
    b = load_bundled(name)
    assert b.gt_env.shape == (*b.env_shape, 3)
    assert b.gt_mat.K == b.material_res
    assert b.train_views and not set(b.train_views) & set(b.held_out)
    i = b.train_views[0]
    img = render(b.scene, b.gt_env, b.gt_mat, i, b.render)
    assert np.array_equal(img.astype(np.float32), b.scene.view(i).observation.astype(np.float32))


def test_save_load_round_trip(tmp_path):
    b = load_bundled("masked_specular")
    save_scene(tmp_path / "copy", b)
    c = load_scene(tmp_path / "copy")
    assert c.render == b.render and c.env_shape == b.env_shape and c.held_out == b.held_out
    np.testing.assert_array_equal(c.scene.mesh.positions, b.scene.mesh.positions)
    for u, v in zip(b.scene.views, c.scene.views):
        np.testing.assert_array_equal(u.pose, v.pose)
        np.testing.assert_array_equal(u.observation, v.observation)
        np.testing.assert_array_equal(u.mask, v.mask)
    np.testing.assert_array_equal(c.gt_mat.roughness, b.gt_mat.roughness)


def test_rebuild_is_deterministic(tmp_path):
    a = build_bundled("rough_030", tmp_path / "a")
    b = load_bundled("rough_030")
    for u, v in zip(a.scene.views, b.scene.views):
        np.testing.assert_array_equal(u.observation, v.observation)


def test_masked_scene_has_masks():
    b = load_bundled("masked_specular")
    for i in b.train_views:
        m = b.scene.view(i).mask
        assert m is not None and m.any() and not m.all()


def test_unknown_render_option_rejected(tmp_path):
    b = load_bundled("diffuse")
    save_scene(tmp_path, b)
    doc = (tmp_path / "scene.json").read_text().replace('"render": {', '"render": {"bogus": 1, ', 1)
    (tmp_path / "scene.json").write_text(doc)
    with pytest.raises(SceneError):
        load_scene(tmp_path)


def test_unknown_bundled_name():
    with pytest.raises(KeyError):
        load_bundled("nope")
