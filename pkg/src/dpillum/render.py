"""Direct-lighting renderer under distant environment illumination.

Every surface pixel sums the contribution of every environment quadrature
direction above its horizon (no Monte Carlo). Geometry is fixed, so the
per-(pixel, direction) geometric terms are computed once per view and
cached on the scene; each render only re-evaluates the roughness-dependent
specular lobe and the RGB sums (the compiled kernel when available).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .brdf import DIELECTRIC_F0
from .envmap import quadrature, validate_env
from .geometry import Scene, intersect

INV_PI = 1.0 / np.pi


@dataclass(frozen=True)
class RenderOptions:
    shadows: bool = False
    hemisphere_cutoff: float = 0.0  # skip directions with cos(theta) <= cutoff
    background: float = 0.0
    alpha_min: float = 1e-3
    texel_subdiv: int = 1

    def __post_init__(self):
        if self.background < 0:
            raise ValueError("background radiance must be >= 0")
        if self.hemisphere_cutoff < 0:
            raise ValueError("hemisphere cutoff must be >= 0")
        if self.texel_subdiv < 1:
            raise ValueError("texel_subdiv must be >= 1")


@dataclass
class MaterialMaps:
    albedo: np.ndarray  # (K, K, 3)
    roughness: np.ndarray  # (K, K)
    metallic: np.ndarray  # (K, K)

    def __post_init__(self):
        self.albedo = np.array(self.albedo, dtype=np.float64)
        self.roughness = np.array(self.roughness, dtype=np.float64)
        self.metallic = np.array(self.metallic, dtype=np.float64)
        K = self.albedo.shape[0]
        if self.albedo.shape != (K, K, 3) or self.roughness.shape != (K, K) or self.metallic.shape != (K, K):
            raise ValueError("material maps must be (K,K,3), (K,K), (K,K)")

    @property
    def K(self) -> int:
        return self.albedo.shape[0]

    @classmethod
    def constant(cls, K: int, albedo=(0.5, 0.5, 0.5), roughness: float = 0.5, metallic: float = 0.0):
        return cls(
            np.broadcast_to(np.asarray(albedo, dtype=np.float64), (K, K, 3)),
            np.full((K, K), float(roughness)),
            np.full((K, K), float(metallic)),
        )

    def copy(self) -> "MaterialMaps":
        return MaterialMaps(self.albedo, self.roughness, self.metallic)

    def clamp(self) -> "MaterialMaps":
        np.clip(self.albedo, 0.0, 1.0, out=self.albedo)
        np.clip(self.roughness, 0.0, 1.0, out=self.roughness)
        np.clip(self.metallic, 0.0, 1.0, out=self.metallic)
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {"albedo": self.albedo, "roughness": self.roughness, "metallic": self.metallic}

    def stacked(self) -> np.ndarray:
        """All five channels as ``(K, K, 5)``."""
        return np.concatenate([self.albedo, self.roughness[..., None], self.metallic[..., None]], axis=2)


@dataclass
class ViewCache:
    height: int
    width: int
    n_texels: int
    pix: np.ndarray  # flat image index of each surface pixel, (P,)
    cos_o: np.ndarray  # (P,)
    tex_idx: np.ndarray  # bilinear material texel indices, (P, 4)
    tex_w: np.ndarray  # bilinear weights, (P, 4)
    indptr: np.ndarray
    tex: np.ndarray
    g: np.ndarray
    nh: np.ndarray
    w: np.ndarray
    cos_i: np.ndarray

    @property
    def n_pixels(self) -> int:
        return self.pix.shape[0]


class NoObservation(ValueError):
    pass


def _bilinear(uv: np.ndarray, K: int):
    x = uv[:, 0] * K - 0.5
    y = uv[:, 1] * K - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = [np.clip(x0, 0, K - 1), np.clip(x0 + 1, 0, K - 1)]
    ys = [np.clip(y0, 0, K - 1), np.clip(y0 + 1, 0, K - 1)]
    idx = np.stack([ys[0] * K + xs[0], ys[0] * K + xs[1], ys[1] * K + xs[0], ys[1] * K + xs[1]], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def build_view_cache(scene: Scene, view_index: int, env_hw: tuple[int, int], K: int,
                     opts: RenderOptions) -> ViewCache:
    view = scene.view(view_index)
    mesh = scene.mesh
    origins, dirs = view.rays()
    hit, tri, t, b1, b2 = intersect(mesh, origins, dirs)
    pix = np.nonzero(hit)[0]
    f = tri[pix]
    bary = np.stack([1.0 - b1[pix] - b2[pix], b1[pix], b2[pix]], axis=1)[:, :, None]
    pos = np.sum(mesh.positions[f] * bary, axis=1)
    nrm = np.sum(mesh.normals[f] * bary, axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    uv = np.sum(mesh.uvs[f] * bary, axis=1)
    wo = -dirs[pix]
    cos_o = np.sum(nrm * wo, axis=1)
    tex_idx, tex_w = _bilinear(uv, K)

    H, W = env_hw
    qdirs, qdw, qtex = quadrature(H, W, opts.texel_subdiv)
    if opts.shadows:
        v0 = mesh.positions[:, 0]
        e1 = np.ascontiguousarray(mesh.positions[:, 1] - v0)
        e2 = np.ascontiguousarray(mesh.positions[:, 2] - v0)
        v0 = np.ascontiguousarray(v0)
    counts = np.zeros(pix.shape[0], dtype=np.int64)
    parts = {k: [] for k in ("tex", "g", "nh", "w", "cos_i")}
    chunk = max(1, 400_000 // qdirs.shape[0])
    for s in range(0, pix.shape[0], chunk):
        n = nrm[s:s + chunk]
        ci = n @ qdirs.T  # (c, K)
        keep = (ci > opts.hemisphere_cutoff) & (cos_o[s:s + chunk, None] > 0)
        rows, cols = np.nonzero(keep)
        if opts.shadows and rows.size:
            org = pos[s:s + chunk][rows] + 1e-4 * n[rows]
            blocked = kernels.any_hit(np.ascontiguousarray(org), np.ascontiguousarray(qdirs[cols]), v0, e1, e2)
            rows, cols = rows[~blocked], cols[~blocked]
        wi = qdirs[cols]
        h = wi + wo[s:s + chunk][rows]
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        ci_e = ci[rows, cols]
        vh = np.clip(np.sum(wi * h, axis=1), 0.0, 1.0)
        parts["tex"].append(qtex[cols])
        parts["g"].append(ci_e * qdw[cols])
        parts["nh"].append(np.sum(n[rows] * h, axis=1))
        parts["w"].append((1.0 - vh) ** 5)
        parts["cos_i"].append(ci_e)
        counts[s:s + chunk] = np.bincount(rows, minlength=n.shape[0])
    indptr = np.zeros(pix.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    def cat(key, dtype=np.float64):
        if not parts[key]:
            return np.zeros(0, dtype=dtype)
        return np.ascontiguousarray(np.concatenate(parts[key]), dtype=dtype)

    return ViewCache(
        view.height, view.width, H * W, pix, np.ascontiguousarray(cos_o),
        tex_idx, tex_w, indptr, cat("tex", np.int64), cat("g"), cat("nh"), cat("w"), cat("cos_i"),
    )


def view_cache(scene: Scene, view_index: int, env_hw, K: int, opts: RenderOptions) -> ViewCache:
    key = (view_index, tuple(env_hw), K, opts)
    vc = scene._cache.get(key)
    if vc is None:
        vc = build_view_cache(scene, view_index, env_hw, K, opts)
        scene._cache[key] = vc
    return vc


def _sample(vc: ViewCache, mat: MaterialMaps):
    K2 = mat.K * mat.K
    a = np.einsum("pk,pkc->pc", vc.tex_w, mat.albedo.reshape(K2, 3)[vc.tex_idx])
    r = np.sum(vc.tex_w * mat.roughness.reshape(K2)[vc.tex_idx], axis=1)
    m = np.sum(vc.tex_w * mat.metallic.reshape(K2)[vc.tex_idx], axis=1)
    return a, np.ascontiguousarray(r), m


def _spread(vc: ViewCache, values: np.ndarray, K: int) -> np.ndarray:
    """Adjoint of bilinear sampling for one scalar channel."""
    return np.bincount(vc.tex_idx.ravel(), weights=(vc.tex_w * values[:, None]).ravel(),
                       minlength=K * K).reshape(K, K)


def _shade_view(vc: ViewCache, env_flat: np.ndarray, mat: MaterialMaps, opts: RenderOptions, want_dr: bool):
    a, r, m = _sample(vc, mat)
    sums, S = kernels.shade(vc.indptr, vc.tex, vc.g, vc.nh, vc.w, vc.cos_i, vc.cos_o, r,
                            env_flat, opts.alpha_min, want_dr)
    E, Pw, Q = sums[:, 0:3], sums[:, 3:6], sums[:, 6:9]
    F0 = DIELECTRIC_F0 * (1.0 - m)[:, None] + a * m[:, None]
    diffuse = (1.0 - m)[:, None] * a * INV_PI
    L = diffuse * E + Pw + F0 * Q
    return L, (a, r, m, F0, diffuse, sums, S)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))  # results keep input order


def render(scene: Scene, env: np.ndarray, mat: MaterialMaps, view_index: int,
           opts: RenderOptions = RenderOptions()) -> np.ndarray:
    """Radiance image ``(height, width, 3)`` of one view."""
    env = validate_env(env)
    view = scene.view(view_index)
    vc = view_cache(scene, view_index, env.shape[:2], mat.K, opts)
    L, _ = _shade_view(vc, np.ascontiguousarray(env.reshape(-1, 3)), mat, opts, False)
    img = np.full((view.height * view.width, 3), float(opts.background))
    img[vc.pix] = L
    return img.reshape(view.height, view.width, 3)


@dataclass
class RenderGrads:
    loss: float
    env: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    residuals: list[np.ndarray]  # per view, observation - rendering, zero where masked

    def material_grads(self) -> dict[str, np.ndarray]:
        return {"albedo": self.albedo, "roughness": self.roughness, "metallic": self.metallic}


def render_loss_and_grads(scene: Scene, env: np.ndarray, mat: MaterialMaps, view_indices=None,
                          opts: RenderOptions = RenderOptions(), *, want_env: bool = True,
                          want_material: bool = True) -> RenderGrads:
    """Sum of squared residuals over unmasked pixels and its analytic
    gradients w.r.t. every env texel and material texel."""
    env = validate_env(env)
    if view_indices is None:
        view_indices = range(len(scene.views))
    view_indices = list(view_indices)
    env_flat = np.ascontiguousarray(env.reshape(-1, 3))
    K = mat.K

    def one(vi):
        view = scene.view(vi)
        if view.observation is None:
            raise NoObservation(f"view {vi} has no observation")
        vc = view_cache(scene, vi, env.shape[:2], K, opts)
        L, (a, r, m, F0, diffuse, sums, S) = _shade_view(vc, env_flat, mat, opts, want_material)
        img = np.full((view.height * view.width, 3), float(opts.background))
        img[vc.pix] = L
        obs = view.observation.reshape(-1, 3)
        res = obs - img
        if view.mask is not None:
            res[~view.mask.reshape(-1)] = 0.0
        loss = float(np.sum(res * res))
        u = -2.0 * res[vc.pix]
        out = {"loss": loss, "res": res.reshape(view.height, view.width, 3)}
        if want_env:
            out["env"] = kernels.env_adjoint(
                vc.indptr, vc.tex, vc.g, vc.w, S,
                np.ascontiguousarray(u * diffuse), np.ascontiguousarray(u), np.ascontiguousarray(u * F0),
                vc.n_texels,
            )
        if want_material:
            E, Q, dP, dQ = sums[:, 0:3], sums[:, 6:9], sums[:, 9:12], sums[:, 12:15]
            ga = u * ((1.0 - m)[:, None] * E * INV_PI + m[:, None] * Q)
            gm = np.sum(u * (-a * E * INV_PI + (a - DIELECTRIC_F0) * Q), axis=1)
            gr = np.sum(u * (dP + F0 * dQ), axis=1)
            out["albedo"] = np.stack([_spread(vc, ga[:, c], K) for c in range(3)], axis=2)
            out["roughness"] = _spread(vc, gr, K)
            out["metallic"] = _spread(vc, gm, K)
        return out

    results = _map(one, view_indices)
    H, W = env.shape[:2]
    total = 0.0
    g_env = np.zeros((H * W, 3))
    g_a = np.zeros((K, K, 3))
    g_r = np.zeros((K, K))
    g_m = np.zeros((K, K))
    for out in results:
        total += out["loss"]
        if want_env:
            g_env += out["env"]
        if want_material:
            g_a += out["albedo"]
            g_r += out["roughness"]
            g_m += out["metallic"]
    return RenderGrads(total, g_env.reshape(H, W, 3), g_a, g_r, g_m, [o["res"] for o in results])


class LinearRender:
    """The renderer as an explicit linear map of the env for frozen materials.

    ``A[c]`` has shape ``(n_pixels_total, H*W)``; pixels are the surface
    pixels of the selected views, concatenated in view order.
    """

    def __init__(self, scene: Scene, mat: MaterialMaps, view_indices, env_hw, opts: RenderOptions):
        H, W = env_hw
        N = H * W
        self.env_hw = (H, W)
        blocks, obs, weights = [], [], []
        self.view_indices = list(view_indices)
        for vi in self.view_indices:
            view = scene.view(vi)
            vc = view_cache(scene, vi, env_hw, mat.K, opts)
            a, r, m = _sample(vc, mat)
            _, S = kernels.shade(vc.indptr, vc.tex, vc.g, vc.nh, vc.w, vc.cos_i, vc.cos_o, r,
                                 np.zeros((N, 3)), opts.alpha_min, False)
            F0 = DIELECTRIC_F0 * (1.0 - m)[:, None] + a * m[:, None]
            diffuse = (1.0 - m)[:, None] * a * INV_PI
            P = vc.n_pixels
            ent_pix = np.repeat(np.arange(P), np.diff(vc.indptr))
            A = np.zeros((3, P * N))
            flat = ent_pix * N + vc.tex
            for c in range(3):
                coef = vc.g * (diffuse[ent_pix, c] + S * (vc.w + F0[ent_pix, c] * (1.0 - vc.w)))
                A[c] = np.bincount(flat, weights=coef, minlength=P * N)
            blocks.append(A.reshape(3, P, N))
            if view.observation is not None:
                obs.append(view.observation.reshape(-1, 3)[vc.pix])
            else:
                obs.append(np.zeros((P, 3)))
            wmask = np.ones(P) if view.mask is None else view.mask.reshape(-1)[vc.pix].astype(np.float64)
            weights.append(wmask)
        self.A = np.concatenate(blocks, axis=1)
        self.y = np.concatenate(obs, axis=0)
        self.weights = np.concatenate(weights)
        # background pixels: constant residual, no env dependence
        self.const_loss = 0.0
        for vi in self.view_indices:
            view = scene.view(vi)
            vc = view_cache(scene, vi, env_hw, mat.K, opts)
            if view.observation is None:
                continue
            bg = np.ones(view.height * view.width, dtype=bool)
            bg[vc.pix] = False
            if view.mask is not None:
                bg &= view.mask.reshape(-1)
            self.const_loss += float(np.sum((view.observation.reshape(-1, 3)[bg] - opts.background) ** 2))

    def apply(self, env: np.ndarray) -> np.ndarray:
        e = env.reshape(-1, 3)
        return np.stack([self.A[c] @ e[:, c] for c in range(3)], axis=1)

    def loss_and_grad(self, env: np.ndarray) -> tuple[float, np.ndarray]:
        res = (self.y - self.apply(env)) * self.weights[:, None]
        g = np.stack([-2.0 * (self.A[c].T @ res[:, c]) for c in range(3)], axis=1)
        return float(np.sum(res * res)) + self.const_loss, g.reshape(*self.env_hw, 3)


class NormalizationError(ValueError):
    pass


def global_median_normalize(env: np.ndarray, target_median: float) -> np.ndarray:
    """Scale ``env`` so the median of all its values equals ``target_median``."""
    if target_median <= 0:
        raise NormalizationError("target median must be positive")
    env = np.asarray(env, dtype=np.float64)
    med = float(np.median(env))
    if med <= 0:
        raise NormalizationError("env median is zero; cannot normalize")
    return env * (target_median / med)
