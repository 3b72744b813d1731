"""Equirectangular environment-map geometry.

Row ``i`` maps to polar angle ``theta = pi*(i+0.5)/H`` measured from +y (up),
column ``j`` to azimuth ``phi = 2*pi*(j+0.5)/W``; the direction is
``(sin(theta)cos(phi), cos(theta), sin(theta)sin(phi))``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class EnvMapError(ValueError):
    pass


def direction(theta, phi) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1)


def texel_solid_angles(H: int, W: int) -> np.ndarray:
    """Exact solid angle of each latitude band cell, shape ``(H, W)``.

    Uses ``2*pi/W * (cos theta_top - cos theta_bottom)`` so the total is 4*pi
    to rounding.
    """
    edges = np.cos(np.pi * np.arange(H + 1) / H)
    band = (2.0 * np.pi / W) * (edges[:-1] - edges[1:])
    return np.repeat(band[:, None], W, axis=1)


@lru_cache(maxsize=16)
def quadrature(H: int, W: int, subdiv: int = 1):
    """Directions, solid angles and owning texel for an ``subdiv x subdiv``
    split of every texel. Returned arrays are flattened, read-only."""
    s = int(subdiv)
    if s < 1:
        raise EnvMapError("subdiv must be >= 1")
    Hs, Ws = H * s, W * s
    theta = np.pi * (np.arange(Hs) + 0.5) / Hs
    phi = 2.0 * np.pi * (np.arange(Ws) + 0.5) / Ws
    T, P = np.meshgrid(theta, phi, indexing="ij")
    dirs = direction(T, P).reshape(-1, 3)
    dw = texel_solid_angles(Hs, Ws).reshape(-1)
    rows = np.arange(Hs)[:, None] // s
    cols = np.arange(Ws)[None, :] // s
    texel = (rows * W + cols).reshape(-1).astype(np.int64)
    for a in (dirs, dw, texel):
        a.flags.writeable = False
    return dirs, dw, texel


def validate_env(env: np.ndarray) -> np.ndarray:
    env = np.asarray(env, dtype=np.float64)
    if env.ndim != 3 or env.shape[2] != 3:
        raise EnvMapError(f"env map must be (H, W, 3), got {env.shape}")
    if not np.isfinite(env).all():
        raise EnvMapError("env map has non-finite values")
    if (env < 0).any():
        raise EnvMapError("env map has negative radiance")
    return env


def rotate(env: np.ndarray, shift: int) -> np.ndarray:
    """Rotate about the vertical axis by ``shift`` columns."""
    return np.roll(env, shift, axis=1)
