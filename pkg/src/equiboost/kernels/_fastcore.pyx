# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot numeric kernels.

Same contracts as equiboost.kernels.reference; selected at import by
equiboost.kernels when available. Loops are written out so they stay fast
for the small per-molecule arrays this package works with, where numpy
dispatch overhead dominates.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport INFINITY, sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double

DEF K_XY = 1.0925484305920792    # 0.5 * sqrt(15/pi)
DEF K_Z2 = 0.31539156525252005   # 0.25 * sqrt(5/pi)
DEF K_X2Y2 = 0.5462742152960396  # 0.25 * sqrt(15/pi)
DEF MIN_EDGE_NORM = 1e-12


def pairwise_distances(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef floating dx, dy, dz, d
    out_arr = np.zeros((n, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_arr
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d = <floating>sqrt(dx * dx + dy * dy + dz * dz)
            out[i, j] = d
            out[j, i] = d
    return out_arr


def pairwise_distances_backward(floating[:, ::1] x, floating[:, ::1] grad):
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef floating dx, dy, dz, d, g
    out_arr = np.zeros((n, 3), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_arr
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d = <floating>sqrt(dx * dx + dy * dy + dz * dz)
            g = (grad[i, j] + grad[j, i]) / d
            out[i, 0] += g * dx
            out[i, 1] += g * dy
            out[i, 2] += g * dz
            out[j, 0] -= g * dx
            out[j, 1] -= g * dy
            out[j, 2] -= g * dz
    return out_arr


def sh2(floating[:, ::1] r):
    cdef Py_ssize_t m = r.shape[0], e
    cdef floating n, ux, uy, uz
    out_arr = np.empty((m, 9), dtype=np.asarray(r).dtype)
    cdef floating[:, ::1] out = out_arr
    for e in range(m):
        n = <floating>sqrt(r[e, 0] * r[e, 0] + r[e, 1] * r[e, 1] + r[e, 2] * r[e, 2])
        if n < MIN_EDGE_NORM:
            raise ValueError("zero-length direction vector in spherical harmonics")
        ux = r[e, 0] / n
        uy = r[e, 1] / n
        uz = r[e, 2] / n
        out[e, 0] = 1.0
        out[e, 1] = ux
        out[e, 2] = uy
        out[e, 3] = uz
        out[e, 4] = <floating>K_XY * ux * uy
        out[e, 5] = <floating>K_XY * uy * uz
        out[e, 6] = <floating>K_Z2 * (3.0 * uz * uz - 1.0)
        out[e, 7] = <floating>K_XY * uz * ux
        out[e, 8] = <floating>K_X2Y2 * (ux * ux - uy * uy)
    return out_arr


def sh2_backward(floating[:, ::1] r, floating[:, ::1] grad):
    cdef Py_ssize_t m = r.shape[0], e
    cdef floating n, ux, uy, uz, gx, gy, gz, proj
    out_arr = np.empty((m, 3), dtype=np.asarray(r).dtype)
    cdef floating[:, ::1] out = out_arr
    for e in range(m):
        n = <floating>sqrt(r[e, 0] * r[e, 0] + r[e, 1] * r[e, 1] + r[e, 2] * r[e, 2])
        ux = r[e, 0] / n
        uy = r[e, 1] / n
        uz = r[e, 2] / n
        gx = grad[e, 1] + <floating>K_XY * (grad[e, 4] * uy + grad[e, 7] * uz) \
            + <floating>K_X2Y2 * 2.0 * ux * grad[e, 8]
        gy = grad[e, 2] + <floating>K_XY * (grad[e, 4] * ux + grad[e, 5] * uz) \
            - <floating>K_X2Y2 * 2.0 * uy * grad[e, 8]
        gz = grad[e, 3] + <floating>K_XY * (grad[e, 5] * uy + grad[e, 7] * ux) \
            + <floating>K_Z2 * 6.0 * uz * grad[e, 6]
        proj = gx * ux + gy * uy + gz * uz
        out[e, 0] = (gx - proj * ux) / n
        out[e, 1] = (gy - proj * uy) / n
        out[e, 2] = (gz - proj * uz) / n
    return out_arr


def segment_sum(floating[:, ::1] values, cnp.int64_t[::1] segments, Py_ssize_t num_segments):
    cdef Py_ssize_t m = values.shape[0], f = values.shape[1], e, k
    cdef cnp.int64_t s
    out_arr = np.zeros((num_segments, f), dtype=np.asarray(values).dtype)
    cdef floating[:, ::1] out = out_arr
    for e in range(m):
        s = segments[e]
        for k in range(f):
            out[s, k] += values[e, k]
    return out_arr


def segment_max(floating[::1] values, cnp.int64_t[::1] segments, Py_ssize_t num_segments):
    cdef Py_ssize_t m = values.shape[0], e
    out_arr = np.full(num_segments, -INFINITY, dtype=np.asarray(values).dtype)
    cdef floating[::1] out = out_arr
    for e in range(m):
        if values[e] > out[segments[e]]:
            out[segments[e]] = values[e]
    return out_arr
