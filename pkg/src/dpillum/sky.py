"""Procedural HDR skies: zenith/horizon gradient, value-noise clouds, a
smoothstep-edged sun disk and a flat ground color."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import load_pfm, rng_stream, save_pfm
from .envmap import direction
from .tonemap import Tonemap

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SkyParams:
    sun_azimuth: float = 0.0
    sun_elevation: float = 0.6
    sun_radius: float = 0.2
    sun_intensity: float = 20.0
    horizon_color: tuple[float, float, float] = (0.9, 0.9, 1.0)
    zenith_color: tuple[float, float, float] = (0.3, 0.45, 0.9)
    ground_color: tuple[float, float, float] = (0.25, 0.22, 0.2)
    cloud_octaves: int = 3
    cloud_gain: float = 0.5
    cloud_cover: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.sun_intensity < 0:
            raise ValueError("sun intensity must be >= 0")
        if not 0.0 <= self.sun_elevation <= np.pi / 2:
            raise ValueError("sun elevation must lie in [0, pi/2]")
        if self.sun_radius <= 0:
            raise ValueError("sun radius must be positive")
        if self.cloud_octaves < 0:
            raise ValueError("cloud octaves must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SkyParams":
        d = dict(d)
        for k in ("horizon_color", "zenith_color", "ground_color"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def smoothstep(e0: float, e1: float, x):
    u = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _value_noise(u: np.ndarray, v: np.ndarray, period: int, rows: int, rng) -> np.ndarray:
    """Smooth lattice noise in [0, 1], periodic in ``u`` with ``period``."""
    lattice = rng.random((rows + 2, period))
    i0 = np.floor(u).astype(np.int64)
    j0 = np.clip(np.floor(v).astype(np.int64), 0, rows)
    fu = smoothstep(0.0, 1.0, u - np.floor(u))
    fv = smoothstep(0.0, 1.0, v - np.floor(v))
    a = lattice[j0, i0 % period]
    b = lattice[j0, (i0 + 1) % period]
    c = lattice[j0 + 1, i0 % period]
    d = lattice[j0 + 1, (i0 + 1) % period]
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


def gen_sky(params: SkyParams, H: int, W: int, supersample: int = 4) -> np.ndarray:
    """``(H, W, 3)`` radiance map; the sun is box-filtered over each texel
    so that small disks still register."""
    if H < 4 or W < 4:
        raise ValueError("sky maps need H, W >= 4")
    theta = np.pi * (np.arange(H) + 0.5) / H
    phi = 2.0 * np.pi * (np.arange(W) + 0.5) / W
    elev = (np.pi / 2 - theta)[:, None] * np.ones((1, W))
    up = np.clip(elev / (np.pi / 2), 0.0, 1.0)[..., None]
    zen = np.asarray(params.zenith_color)
    hor = np.asarray(params.horizon_color)
    sky = hor + (zen - hor) * np.sqrt(up)
    out = np.where((elev >= 0)[..., None], sky, np.asarray(params.ground_color))

    if params.cloud_octaves > 0 and params.cloud_gain > 0:
        rng = rng_stream(params.seed, "sky/clouds")
        noise = np.zeros((H, W))
        amp, norm = 1.0, 0.0
        for o in range(params.cloud_octaves):
            period = 4 * 2 ** o
            rows = 2 * 2 ** o
            uu = (phi / (2 * np.pi) * period)[None, :] * np.ones((H, 1))
            vv = up[..., 0] * rows
            noise += amp * _value_noise(uu, vv, period, rows, rng)
            norm += amp
            amp *= params.cloud_gain
        noise /= norm
        cover = smoothstep(1.0 - params.cloud_cover - 0.15, 1.0 - params.cloud_cover + 0.15, noise)
        cover *= (elev > 0)
        cloud = 0.8 * np.mean(hor) * np.ones(3) + 0.2
        out = out * (1 - cover[..., None]) + cloud * cover[..., None]

    if params.sun_intensity > 0:
        n = supersample
        ts = np.pi * (np.arange(H * n) + 0.5) / (H * n)
        ps = 2.0 * np.pi * (np.arange(W * n) + 0.5) / (W * n)
        T, P = np.meshgrid(ts, ps, indexing="ij")
        d = direction(T, P)
        sun_dir = direction(np.pi / 2 - params.sun_elevation, params.sun_azimuth)
        ang = np.arccos(np.clip(d @ sun_dir, -1.0, 1.0))
        disk = params.sun_intensity * (1.0 - smoothstep(0.5 * params.sun_radius, params.sun_radius, ang))
        wts = np.sin(T)
        disk = (disk * wts).reshape(H, n, W, n).sum(axis=(1, 3)) / wts.reshape(H, n, W, n).sum(axis=(1, 3))
        out = out + disk[..., None] * np.array([1.0, 0.95, 0.85])
    return np.maximum(out, 0.0)


def random_params(rng: np.random.Generator, seed: int) -> SkyParams:
    """Draw one sky configuration (the cloud seed is ``seed``)."""
    zen = np.array([0.25, 0.4, 0.85]) * rng.uniform(0.5, 1.5) + rng.uniform(-0.08, 0.08, 3)
    hor = np.array([0.85, 0.85, 0.95]) * rng.uniform(0.6, 1.4) + rng.uniform(-0.1, 0.1, 3)
    gnd = np.array([0.3, 0.25, 0.2]) * rng.uniform(0.3, 1.5) + rng.uniform(-0.05, 0.05, 3)
    return SkyParams(
        sun_azimuth=float(rng.uniform(0, 2 * np.pi)),
        sun_elevation=float(rng.uniform(0.1, 1.3)),
        sun_radius=float(rng.uniform(0.15, 0.3)),
        sun_intensity=float(rng.uniform(0.0, 50.0) if rng.random() < 0.85 else 0.0),
        horizon_color=tuple(float(c) for c in np.clip(hor, 0.05, None)),
        zenith_color=tuple(float(c) for c in np.clip(zen, 0.05, None)),
        ground_color=tuple(float(c) for c in np.clip(gnd, 0.02, None)),
        cloud_octaves=int(rng.integers(0, 4)),
        cloud_gain=float(rng.uniform(0.3, 0.7)),
        cloud_cover=float(rng.uniform(0.1, 0.7)),
        seed=seed,
    )


def gen_corpus(seed: int, count: int, H: int, W: int, tonemap: Tonemap,
               out_dir: str | os.PathLike) -> dict:
    """Write ``count`` sky PFMs plus a JSON manifest; returns the manifest."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps, values = [], []
    for i in range(count):
        rng = rng_stream(seed, f"corpus/{i}")
        params = random_params(rng, seed=int(rng.integers(2**31)))
        env = gen_sky(params, H, W).astype(np.float32)
        name = f"sky_{i:04d}.pfm"
        save_pfm(out / name, env)
        values.append(env.ravel())
        maps.append({"file": name, "params": asdict(params)})
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "height": H,
        "width": W,
        "tonemap": {"scale": tonemap.scale, "exponent": tonemap.exponent},
        "maps": maps,
        "corpus_median": float(np.median(np.concatenate(values))),
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_corpus(data_dir: str | os.PathLike) -> tuple[list[np.ndarray], dict]:
    """HDR maps listed in the manifest, in manifest order."""
    d = Path(data_dir)
    with open(d / MANIFEST) as fh:
        manifest = json.load(fh)
    maps = [load_pfm(d / m["file"]).data.astype(np.float64) for m in manifest["maps"]]
    return maps, manifest
