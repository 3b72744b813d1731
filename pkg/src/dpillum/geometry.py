"""Triangle meshes, pinhole views and ray casting for a fixed scene."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .envmap import direction


class SceneError(ValueError):
    pass


@dataclass
class Mesh:
    """Per-corner triangle soup: ``positions``/``normals`` are ``(F, 3, 3)``,
    ``uvs`` ``(F, 3, 2)``."""

    positions: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.uvs = np.asarray(self.uvs, dtype=np.float64)
        F = self.positions.shape[0]
        if self.positions.shape != (F, 3, 3) or self.normals.shape != (F, 3, 3):
            raise SceneError("positions/normals must be (F, 3, 3)")
        if self.uvs.shape != (F, 3, 2):
            raise SceneError("uvs must be (F, 3, 2)")
        if not np.isfinite(self.uvs).all():
            raise SceneError("triangle with invalid UVs")
        lengths = np.linalg.norm(self.normals, axis=-1)
        if np.abs(lengths - 1.0).max(initial=0.0) > 1e-6:
            raise SceneError("vertex normals must be unit length")

    @property
    def n_triangles(self) -> int:
        return self.positions.shape[0]


@dataclass
class View:
    pose: np.ndarray  # camera-to-world, 4x4; camera looks down +z, y down
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    observation: np.ndarray | None = None
    mask: np.ndarray | None = None  # True = pixel used

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.observation is not None:
            self.observation = np.asarray(self.observation, dtype=np.float64)
            if self.observation.shape != (self.height, self.width, 3):
                raise SceneError("observation shape does not match view size")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool).reshape(self.height, self.width)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions, row-major over pixels."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        d = np.stack(
            [(xs + 0.5 - self.cx) / self.fx, (ys + 0.5 - self.cy) / self.fy, np.ones(xs.shape)],
            axis=-1,
        ).reshape(-1, 3)
        d = d @ self.pose[:3, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.pose[:3, 3], d.shape).copy()
        return o, d


@dataclass
class Scene:
    mesh: Mesh
    views: list[View]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def view(self, i: int) -> View:
        if not 0 <= i < len(self.views):
            raise IndexError(f"view index {i} out of range [0, {len(self.views)})")
        return self.views[i]


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    y = -(up - np.dot(up, z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def rotation_y(angle: float) -> np.ndarray:
    """Rotation about +y taking azimuth ``phi`` to ``phi + angle``."""
    c, s = np.cos(angle), np.sin(angle)
    # direction() uses (sin t cos p, cos t, sin t sin p)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def make_view(eye, target, size: int, fov_deg: float = 40.0, up=(0.0, 1.0, 0.0)) -> View:
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2.0)
    return View(look_at(eye, target, up), f, f, size / 2.0, size / 2.0, size, size)


def uv_sphere(radius: float = 1.0, n_lat: int = 16, n_lon: int = 32, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Sphere whose longitude lines sit at multiples of ``2*pi/n_lon``, so
    rotating it by that angle about +y maps the mesh onto itself."""
    c = np.asarray(center, dtype=np.float64)
    theta = np.pi * np.arange(n_lat + 1) / n_lat
    phi = 2.0 * np.pi * np.arange(n_lon + 1) / n_lon
    T, Pp = np.meshgrid(theta, phi, indexing="ij")
    nrm = direction(T, Pp)
    nrm[0, :] = (0.0, 1.0, 0.0)
    nrm[-1, :] = (0.0, -1.0, 0.0)
    pos = c + radius * nrm
    uv = np.stack([Pp / (2.0 * np.pi), T / np.pi], axis=-1)
    tris_p, tris_n, tris_uv = [], [], []

    def corner(i, j):
        return pos[i, j], nrm[i, j], uv[i, j]

    for i in range(n_lat):
        for j in range(n_lon):
            a, b, cc, d = corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1)
            if i == 0:
                quads = [(a, b, cc)]
            elif i == n_lat - 1:
                quads = [(a, cc, d)]
            else:
                quads = [(a, b, cc), (a, cc, d)]
            for tri in quads:
                tris_p.append([v[0] for v in tri])
                tris_n.append([v[1] for v in tri])
                tris_uv.append([v[2] for v in tri])
    return Mesh(np.array(tris_p), np.array(tris_n), np.array(tris_uv))


def quad(corners, uv_corners=((0, 0), (1, 0), (1, 1), (0, 1))) -> Mesh:
    p = np.asarray(corners, dtype=np.float64)
    n = np.cross(p[1] - p[0], p[3] - p[0])
    n /= np.linalg.norm(n)
    uv = np.asarray(uv_corners, dtype=np.float64)
    idx = [(0, 1, 2), (0, 2, 3)]
    return Mesh(
        np.array([p[list(t)] for t in idx]),
        np.broadcast_to(n, (2, 3, 3)).copy(),
        np.array([uv[list(t)] for t in idx]),
    )


def merge(*meshes: Mesh) -> Mesh:
    return Mesh(
        np.concatenate([m.positions for m in meshes]),
        np.concatenate([m.normals for m in meshes]),
        np.concatenate([m.uvs for m in meshes]),
    )


def intersect(mesh: Mesh, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: ``(hit, tri, t, b1, b2)`` with barycentrics of
    corners 1 and 2."""
    v0 = mesh.positions[:, 0]
    e1 = mesh.positions[:, 1] - v0
    e2 = mesh.positions[:, 2] - v0
    R = origins.shape[0]
    best_t = np.full(R, np.inf)
    best_f = np.full(R, -1, dtype=np.int64)
    best_u = np.zeros(R)
    best_v = np.zeros(R)
    chunk = max(1, 1_000_000 // max(1, mesh.n_triangles))
    for s in range(0, R, chunk):
        o = origins[s:s + chunk, None, :]
        d = dirs[s:s + chunk, None, :]
        pvec = np.cross(d, e2[None])
        det = np.sum(e1[None] * pvec, axis=-1)
        ok = np.abs(det) > 1e-12
        inv = 1.0 / np.where(ok, det, 1.0)
        tvec = o - v0[None]
        u = np.sum(tvec * pvec, axis=-1) * inv
        qvec = np.cross(tvec, e1[None])
        v = np.sum(d * qvec, axis=-1) * inv
        t = np.sum(e2[None] * qvec, axis=-1) * inv
        good = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(good, t, np.inf)
        f = np.argmin(t, axis=1)
        rows = np.arange(f.shape[0])
        tt = t[rows, f]
        sl = slice(s, s + f.shape[0])
        best_t[sl] = tt
        best_f[sl] = np.where(np.isfinite(tt), f, -1)
        best_u[sl] = u[rows, f]
        best_v[sl] = v[rows, f]
    hit = best_f >= 0
    return hit, best_f, best_t, best_u, best_v


# -- OBJ subset ----------------------------------------------------------------

def load_obj(path: str | os.PathLike) -> Mesh:
    """Read ``v``/``vt``/``vn``/``f v/vt/vn`` records; polygons are fanned."""
    vs, vts, vns = [], [], []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    vs.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    vts.append([float(x) for x in parts[1:3]])
                elif tag == "vn":
                    vns.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    corners = []
                    for c in parts[1:]:
                        idx = c.split("/")
                        if len(idx) != 3 or not idx[1] or not idx[2]:
                            raise SceneError(f"{path}:{lineno}: faces need v/vt/vn indices")
                        corners.append(tuple(int(i) - 1 for i in idx))
                    for k in range(1, len(corners) - 1):
                        faces.append((corners[0], corners[k], corners[k + 1]))
            except ValueError as exc:
                raise SceneError(f"{path}:{lineno}: {exc}") from None
    if not faces:
        raise SceneError(f"{path}: no faces")
    V, VT, VN = np.array(vs), np.array(vts), np.array(vns)
    fi = np.array(faces)  # (F, 3, 3)
    nrm = VN[fi[:, :, 2]]
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    return Mesh(V[fi[:, :, 0]], nrm, VT[fi[:, :, 1]])


def save_obj(path: str | os.PathLike, mesh: Mesh) -> None:
    F = mesh.n_triangles
    lines = []
    for arr, tag in ((mesh.positions, "v"), (mesh.uvs, "vt"), (mesh.normals, "vn")):
        for row in arr.reshape(F * 3, -1):
            lines.append(tag + " " + " ".join(repr(float(x)) for x in row))
    for f in range(F):
        c = [3 * f + k + 1 for k in range(3)]
        lines.append("f " + " ".join(f"{i}/{i}/{i}" for i in c))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
