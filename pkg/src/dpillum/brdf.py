"""Metallic/roughness Cook-Torrance BRDF: Lambert diffuse, GGX distribution
(alpha = roughness**2), Schlick Fresnel, Smith-Schlick geometry with
k = (roughness + 1)**2 / 8."""

from __future__ import annotations

import numpy as np

ALPHA_MIN = 1e-3
DIELECTRIC_F0 = 0.04


def ggx_alpha(r, alpha_min: float = ALPHA_MIN):
    return np.maximum(np.square(r), alpha_min)


def specular_lobe(nh, cos_i, cos_o, r, alpha_min: float = ALPHA_MIN):
    """``S = D*G / (4 cos_i cos_o)`` and ``dS/dr``, elementwise.

    The Fresnel factor is kept out so callers can split it per channel.
    """
    r = np.asarray(r, dtype=np.float64)
    raw = r * r
    alpha = np.maximum(raw, alpha_min)
    a2 = alpha * alpha
    denom = nh * nh * (a2 - 1.0) + 1.0
    D = a2 / (np.pi * denom * denom)
    k = (r + 1.0) ** 2 / 8.0
    gi = cos_i * (1.0 - k) + k
    go = cos_o * (1.0 - k) + k
    G = (cos_i / gi) * (cos_o / go)
    S = D * G / (4.0 * cos_i * cos_o)
    # d ln D / d alpha, zero below the roughness floor
    dlnD = np.where(raw > alpha_min, (2.0 / alpha - 4.0 * alpha * nh * nh / denom) * 2.0 * r, 0.0)
    dk = (r + 1.0) / 4.0
    dlnG = -((1.0 - cos_i) / gi + (1.0 - cos_o) / go) * dk
    return S, S * (dlnD + dlnG)


def fresnel_weight(vh):
    return (1.0 - np.clip(vh, 0.0, 1.0)) ** 5


def base_reflectance(a, m):
    m = np.asarray(m, dtype=np.float64)[..., None]
    return DIELECTRIC_F0 * (1.0 - m) + np.asarray(a) * m


def brdf_eval(a, r, m, n, wi, wo, alpha_min: float = ALPHA_MIN) -> np.ndarray:
    """Evaluate the BRDF (RGB) for unit vectors ``n``, ``wi``, ``wo``.

    Inputs broadcast; zero where either direction is below the surface.
    """
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    ci = np.sum(n * wi, axis=-1)
    co = np.sum(n * wo, axis=-1)
    valid = (ci > 0) & (co > 0)
    ci_s = np.where(valid, ci, 1.0)
    co_s = np.where(valid, co, 1.0)
    h = wi + wo
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    h = h / np.where(hn > 0, hn, 1.0)
    nh = np.sum(n * h, axis=-1)
    vh = np.sum(wo * h, axis=-1)
    S, _ = specular_lobe(nh, ci_s, co_s, r, alpha_min)
    F0 = base_reflectance(a, m)
    F = F0 + (1.0 - F0) * fresnel_weight(vh)[..., None]
    m_ = np.asarray(m, dtype=np.float64)[..., None]
    f = (1.0 - m_) * a / np.pi + S[..., None] * F
    return np.where(valid[..., None], f, 0.0)
