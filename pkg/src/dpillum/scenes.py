"""Scene directories (``scene.json`` + OBJ + PFMs) and the bundled toy scenes."""

from __future__ import annotations

import json
import os
from dataclasses import replace, asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import read_image, save_pfm
from .geometry import Scene, SceneError, View, load_obj, make_view, rotation_y, save_obj, uv_sphere
from .render import MaterialMaps, RenderOptions, render
from .sky import SkyParams, gen_sky

SCENE_FILE = "scene.json"
DATA_DIR = Path(__file__).parent / "data"
BUNDLED = ("diffuse", "rough_005", "rough_030", "rough_070", "masked_specular", "toy_inversion")


@dataclass
class SceneBundle:
    scene: Scene
    render: RenderOptions
    env_shape: tuple[int, int]
    material_res: int
    held_out: list[int] = field(default_factory=list)
    gt_env: np.ndarray | None = None
    gt_mat: MaterialMaps | None = None

    @property
    def train_views(self) -> list[int]:
        return [i for i, v in enumerate(self.scene.views) if i not in self.held_out and v.observation is not None]


def _opts_from(d: dict) -> RenderOptions:
    allowed = set(RenderOptions.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise SceneError(f"unknown render option(s): {sorted(unknown)}")
    return RenderOptions(**d)


def load_scene(path: str | os.PathLike) -> SceneBundle:
    root = Path(path)
    if root.is_dir():
        root = root / SCENE_FILE
    base = root.parent
    try:
        with open(root) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{root}: {exc}") from None
    mesh = load_obj(base / doc["mesh"])
    views, held = [], []
    for i, v in enumerate(doc["views"]):
        obs = read_image(base / v["observation"]) if v.get("observation") else None
        mask = read_image(base / v["mask"])[..., 0] > 0.5 if v.get("mask") else None
        views.append(View(np.array(v["pose"]), v["fx"], v["fy"], v["cx"], v["cy"],
                          int(v["width"]), int(v["height"]), obs, mask))
        if v.get("held_out"):
            held.append(i)
    gt = doc.get("ground_truth") or {}
    gt_env = read_image(base / gt["env"]) if "env" in gt else None
    gt_mat = None
    if "albedo" in gt:
        gt_mat = MaterialMaps(read_image(base / gt["albedo"]),
                              read_image(base / gt["roughness"])[..., 0],
                              read_image(base / gt["metallic"])[..., 0])
    return SceneBundle(Scene(mesh, views), _opts_from(doc.get("render", {})),
                       tuple(doc.get("env_shape", (16, 32))), int(doc.get("material_res", 32)),
                       held, gt_env, gt_mat)


def save_scene(path: str | os.PathLike, bundle: SceneBundle) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_obj(root / "mesh.obj", bundle.scene.mesh)
    views = []
    for i, v in enumerate(bundle.scene.views):
        entry = {"pose": v.pose.tolist(), "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
                 "width": v.width, "height": v.height, "observation": None, "mask": None,
                 "held_out": i in bundle.held_out}
        if v.observation is not None:
            entry["observation"] = f"view_{i:02d}.pfm"
            save_pfm(root / entry["observation"], v.observation)
        if v.mask is not None:
            entry["mask"] = f"mask_{i:02d}.pfm"
            save_pfm(root / entry["mask"], v.mask.astype(np.float32)[..., None])
        views.append(entry)
    doc = {"version": 1, "mesh": "mesh.obj", "render": asdict(bundle.render),
           "env_shape": list(bundle.env_shape), "material_res": bundle.material_res, "views": views}
    if bundle.gt_env is not None:
        doc["ground_truth"] = {"env": "gt_env.pfm"}
        save_pfm(root / "gt_env.pfm", bundle.gt_env)
        if bundle.gt_mat is not None:
            doc["ground_truth"].update(albedo="gt_albedo.pfm", roughness="gt_roughness.pfm",
                                       metallic="gt_metallic.pfm")
            save_pfm(root / "gt_albedo.pfm", bundle.gt_mat.albedo)
            save_pfm(root / "gt_roughness.pfm", bundle.gt_mat.roughness[..., None])
            save_pfm(root / "gt_metallic.pfm", bundle.gt_mat.metallic[..., None])
    with open(root / SCENE_FILE, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled scene {name!r}; have {BUNDLED}")
    return DATA_DIR / "scenes" / name


def load_bundled(name: str) -> SceneBundle:
    return load_scene(bundled_path(name))


# -- construction -------------------------------------------------------------

GT_SKY = SkyParams(sun_azimuth=2.2, sun_elevation=0.7, sun_radius=0.25, sun_intensity=8.0,
                   horizon_color=(0.95, 0.9, 0.85), zenith_color=(0.3, 0.45, 0.85),
                   ground_color=(0.3, 0.25, 0.2), cloud_octaves=2, cloud_gain=0.5,
                   cloud_cover=0.35, seed=20240611)
# dimmer, wider sun for the roughness sweep: the init stage can grow it within its budget
SWEEP_SKY = replace(GT_SKY, sun_intensity=3.0, sun_radius=0.3)


def orbit_views(n: int, size: int, radius: float = 3.5, height: float = 1.0, offset: float = 0.0) -> list[View]:
    views = []
    for k in range(n):
        ang = offset + 2.0 * np.pi * k / n
        eye = rotation_y(ang) @ np.array([0.0, height, radius])
        views.append(make_view(eye, (0.0, 0.0, 0.0), size))
    return views


def _texture(K: int, fn) -> np.ndarray:
    v, u = np.mgrid[0:K, 0:K]
    return fn((u + 0.5) / K, (v + 0.5) / K)


def _finish(bundle: SceneBundle, out: Path) -> SceneBundle:
    """Save, reload, render observations from the reloaded geometry, save
    again, so a re-render of the stored scene matches bit for bit."""
    save_scene(out, bundle)
    loaded = load_scene(out)
    env = bundle.gt_env.astype(np.float32).astype(np.float64)
    f32 = lambda a: np.asarray(a).astype(np.float32).astype(np.float64)
    mat = MaterialMaps(f32(bundle.gt_mat.albedo), f32(bundle.gt_mat.roughness), f32(bundle.gt_mat.metallic))
    for i, v in enumerate(loaded.scene.views):
        v.observation = render(loaded.scene, env, mat, i, loaded.render).astype(np.float32).astype(np.float64)
        v.mask = bundle.scene.views[i].mask
    loaded.gt_env, loaded.gt_mat, loaded.held_out = env, mat, bundle.held_out
    save_scene(out, loaded)
    return loaded


def build_bundled(name: str, out_dir: str | os.PathLike) -> SceneBundle:
    out = Path(out_dir)
    H, W = 16, 32
    env = gen_sky(GT_SKY, H, W)
    sphere = uv_sphere(1.0, 24, 48)
    size = 32
    if name == "diffuse":
        K = 32
        albedo = _texture(K, lambda u, v: np.stack(
            [0.55 + 0.25 * np.sin(2 * np.pi * 2 * u), 0.5 + 0.2 * np.cos(2 * np.pi * 3 * v), 0.45 + 0 * u], -1))
        mat = MaterialMaps(albedo, np.ones((K, K)), np.zeros((K, K)))
        b = SceneBundle(Scene(sphere, orbit_views(3, size)), RenderOptions(), (H, W), K)
    elif name.startswith("rough_"):
        r = int(name.split("_")[1]) / 100.0
        K = 8
        mat = MaterialMaps.constant(K, (0.9, 0.9, 0.9), r, 1.0)
        env = gen_sky(SWEEP_SKY, H, W)
        b = SceneBundle(Scene(sphere, orbit_views(3, size)), RenderOptions(alpha_min=0.04, texel_subdiv=2), (H, W), K)
    elif name == "masked_specular":
        env = gen_sky(replace(GT_SKY, sun_azimuth=0.1), H, W)  # sun reflected only by the masked half
        K = 8
        mat = MaterialMaps.constant(K, (0.9, 0.9, 0.9), 0.05, 1.0)
        # two nearby cameras: the masked half of the sphere reflects an env
        # region no unmasked pixel sees
        views = [orbit_views(1, size, offset=a)[0] for a in (0.0, 0.3)]
        for v in views:
            m = np.ones((size, size), dtype=bool)
            m[:, size // 2:] = False  # right half of every view is excluded
            v.mask = m
        b = SceneBundle(Scene(sphere, views), RenderOptions(alpha_min=0.04, texel_subdiv=2), (H, W), K)
    elif name == "toy_inversion":
        K = 32
        albedo = _texture(K, lambda u, v: np.stack(
            [0.6 + 0.2 * np.sin(2 * np.pi * 2 * u), 0.45 + 0.15 * np.cos(2 * np.pi * 2 * v), 0.35 + 0.1 * np.sin(2 * np.pi * (u + v))], -1))
        rough = _texture(K, lambda u, v: 0.45 + 0.15 * np.cos(2 * np.pi * u))
        metal = _texture(K, lambda u, v: 0.3 * (v > 0.5))
        mat = MaterialMaps(albedo, rough, metal)
        views = orbit_views(4, size) + orbit_views(2, size, height=0.3, offset=np.pi / 4)
        b = SceneBundle(Scene(sphere, views), RenderOptions(), (H, W), K, held_out=[4, 5])
    else:
        raise KeyError(f"unknown bundled scene {name!r}")
    b.gt_env, b.gt_mat = env, mat
    return _finish(b, out)


def build_all(root: str | os.PathLike | None = None) -> None:
    root = Path(root) if root is not None else DATA_DIR / "scenes"
    for name in BUNDLED:
        build_bundled(name, root / name)
