"""numpy implementation of the shading kernels (reference + fallback).

Entries are stored CSR-style: pixel ``p`` owns entries
``indptr[p]:indptr[p+1]``, each one a (pixel, quadrature direction) pair
with its texel index ``tex``, geometric weight ``g = cos_i * solid_angle``,
``nh = n.h``, Fresnel weight ``w = (1 - v.h)**5`` and ``cos_i``.

``shade`` returns per-pixel sums, columns (each RGB):
``E = sum env*g``, ``P = sum env*g*S*w``, ``Q = sum env*g*S*(1-w)``,
and the roughness derivatives ``dP``, ``dQ`` (``S`` replaced by ``dS/dr``).
"""

import numpy as np
import scipy.sparse as sp

from .brdf import specular_lobe


def _segments(indptr, n_entries):
    P = indptr.shape[0] - 1
    return sp.csr_matrix(
        (np.ones(n_entries), np.arange(n_entries), indptr), shape=(P, n_entries)
    )


def shade(indptr, tex, g, nh, w, cos_i, cos_o, rough, env, alpha_min, want_dr=True):
    nnz = tex.shape[0]
    P = indptr.shape[0] - 1
    pix = np.repeat(np.arange(P), np.diff(indptr))
    S, dS = specular_lobe(nh, cos_i, cos_o[pix], rough[pix], alpha_min)
    ev = env[tex] * g[:, None]
    cols = [ev, ev * (S * w)[:, None], ev * (S * (1.0 - w))[:, None]]
    if want_dr:
        cols += [ev * (dS * w)[:, None], ev * (dS * (1.0 - w))[:, None]]
    else:
        cols += [np.zeros_like(ev), np.zeros_like(ev)]
    sums = _segments(indptr, nnz) @ np.concatenate(cols, axis=1)
    return np.asarray(sums), S


def env_adjoint(indptr, tex, g, w, S, ca, cb, cc, n_texels):
    P = indptr.shape[0] - 1
    pix = np.repeat(np.arange(P), np.diff(indptr))
    gs = g * S
    vals = g[:, None] * ca[pix] + gs[:, None] * (w[:, None] * cb[pix] + (1.0 - w)[:, None] * cc[pix])
    out = np.empty((n_texels, 3))
    for c in range(3):
        out[:, c] = np.bincount(tex, weights=vals[:, c], minlength=n_texels)
    return out


def any_hit(origins, dirs, v0, e1, e2, tmin=1e-6):
    """Boolean occlusion per ray against all triangles (Moller-Trumbore)."""
    R = origins.shape[0]
    hit = np.zeros(R, dtype=bool)
    chunk = max(1, 2_000_000 // max(1, v0.shape[0]))
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
        h = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin)
        hit[s:s + chunk] = h.any(axis=1)
    return hit
