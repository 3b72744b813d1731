# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled shading kernels; same contract as ``_shade_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

cdef double PI = 3.141592653589793


def shade(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] tex,
          const double[::1] g, const double[::1] nh, const double[::1] w,
          const double[::1] cos_i, const double[::1] cos_o, const double[::1] rough,
          const double[:, ::1] env, double alpha_min, bint want_dr=True):
    cdef Py_ssize_t P = indptr.shape[0] - 1
    cdef Py_ssize_t nnz = tex.shape[0]
    sums_arr = np.zeros((P, 15), dtype=np.float64)
    S_arr = np.empty(nnz, dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    cdef double[::1] S_out = S_arr
    cdef Py_ssize_t p, e, n, c
    cdef double r, raw, alpha, a2, k, dk, co, go, ci, gi, nh2, denom, D, G, S, dS
    cdef double dlnD_fac, ev, sw, s1w, dsw, ds1w, we, ge
    with nogil:
        for p in range(P):
            r = rough[p]
            raw = r * r
            alpha = raw if raw > alpha_min else alpha_min
            a2 = alpha * alpha
            k = (r + 1.0) * (r + 1.0) / 8.0
            dk = (r + 1.0) / 4.0
            co = cos_o[p]
            go = co * (1.0 - k) + k
            for e in range(indptr[p], indptr[p + 1]):
                ci = cos_i[e]
                gi = ci * (1.0 - k) + k
                nh2 = nh[e] * nh[e]
                denom = nh2 * (a2 - 1.0) + 1.0
                D = a2 / (PI * denom * denom)
                G = (ci / gi) * (co / go)
                S = D * G / (4.0 * ci * co)
                S_out[e] = S
                we = w[e]
                ge = g[e]
                sw = S * we
                s1w = S * (1.0 - we)
                n = tex[e]
                if want_dr:
                    if raw > alpha_min:
                        dlnD_fac = (2.0 / alpha - 4.0 * alpha * nh2 / denom) * 2.0 * r
                    else:
                        dlnD_fac = 0.0
                    dS = S * (dlnD_fac - ((1.0 - ci) / gi + (1.0 - co) / go) * dk)
                    dsw = dS * we
                    ds1w = dS * (1.0 - we)
                    for c in range(3):
                        ev = env[n, c] * ge
                        sums[p, c] += ev
                        sums[p, 3 + c] += ev * sw
                        sums[p, 6 + c] += ev * s1w
                        sums[p, 9 + c] += ev * dsw
                        sums[p, 12 + c] += ev * ds1w
                else:
                    for c in range(3):
                        ev = env[n, c] * ge
                        sums[p, c] += ev
                        sums[p, 3 + c] += ev * sw
                        sums[p, 6 + c] += ev * s1w
    return sums_arr, S_arr


def env_adjoint(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] tex,
                const double[::1] g, const double[::1] w, const double[::1] S,
                const double[:, ::1] ca, const double[:, ::1] cb, const double[:, ::1] cc,
                Py_ssize_t n_texels):
    cdef Py_ssize_t P = indptr.shape[0] - 1
    out_arr = np.zeros((n_texels, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, e, n, c
    cdef double ge, gs, we
    with nogil:
        for p in range(P):
            for e in range(indptr[p], indptr[p + 1]):
                n = tex[e]
                ge = g[e]
                gs = ge * S[e]
                we = w[e]
                for c in range(3):
                    out[n, c] += ge * ca[p, c] + gs * (we * cb[p, c] + (1.0 - we) * cc[p, c])
    return out_arr


def any_hit(const double[:, ::1] origins, const double[:, ::1] dirs,
            const double[:, ::1] v0, const double[:, ::1] e1, const double[:, ::1] e2,
            double tmin=1e-6):
    cdef Py_ssize_t R = origins.shape[0]
    cdef Py_ssize_t F = v0.shape[0]
    hit_arr = np.zeros(R, dtype=bool)
    cdef cnp.uint8_t[::1] hit = hit_arr.view(np.uint8)
    cdef Py_ssize_t i, f
    cdef double ox, oy, oz, dx, dy, dz, px, py, pz, det, inv, tx, ty, tz, u, v, t, qx, qy, qz
    with nogil:
        for i in range(R):
            ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            for f in range(F):
                px = dy * e2[f, 2] - dz * e2[f, 1]
                py = dz * e2[f, 0] - dx * e2[f, 2]
                pz = dx * e2[f, 1] - dy * e2[f, 0]
                det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
                if fabs(det) <= 1e-12:
                    continue
                inv = 1.0 / det
                tx = ox - v0[f, 0]; ty = oy - v0[f, 1]; tz = oz - v0[f, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1[f, 2] - tz * e1[f, 1]
                qy = tz * e1[f, 0] - tx * e1[f, 2]
                qz = tx * e1[f, 1] - ty * e1[f, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * inv
                if t > tmin:
                    hit[i] = 1
                    break
    return hit_arr
