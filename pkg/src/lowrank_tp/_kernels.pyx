# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`lowrank_tp._fallback` exactly."""

from libc.math cimport sqrt, fabs, cos, sin, pow
from libc.string cimport memcpy

import numpy as np
cimport numpy as cnp

cnp.import_array()


def jacobi_sweeps(double[:, ::1] g, double[:, ::1] v, double tol, int max_sweeps):
    """Hestenes one-sided Jacobi on the rows of ``g``; rotations accumulate into ``v``.

    Returns ``(sweeps, converged)``.
    """
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t m = g.shape[1]
    cdef Py_ssize_t nv = v.shape[1]
    cdef Py_ssize_t i, j, r
    cdef double alpha, beta, gamma, zeta, t, c, s, a, b
    cdef int sweep, rotated

    for sweep in range(max_sweeps):
        rotated = 0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    a = g[i, r]
                    b = g[j, r]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    a = g[i, r]
                    b = g[j, r]
                    g[i, r] = c * a - s * b
                    g[j, r] = s * a + c * b
                for r in range(nv):
                    a = v[i, r]
                    b = v[j, r]
                    v[i, r] = c * a - s * b
                    v[j, r] = s * a + c * b
        if not rotated:
            return sweep + 1, True
    return max_sweeps, False


def scan_runs(const cnp.int64_t[::1] physical):
    """Maximal runs of consecutive physical indices, as an (n_runs, 2) array of (start, length)."""
    cdef Py_ssize_t n = physical.shape[0]
    cdef Py_ssize_t i, k = 0
    out = np.empty((n, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    if n == 0:
        return out
    o[0, 0] = physical[0]
    o[0, 1] = 1
    for i in range(1, n):
        if physical[i] == physical[i - 1] + 1:
            o[k, 1] += 1
        else:
            k += 1
            o[k, 0] = physical[i]
            o[k, 1] = 1
    return out[:k + 1]


def squeeze_copy(const double[:, ::1] src_k, const double[:, ::1] src_v, const cnp.int64_t[::1] src_pos,
                 const cnp.int64_t[:, ::1] runs, Py_ssize_t n_runs,
                 double[:, ::1] dst_k, double[:, ::1] dst_v, cnp.int64_t[::1] dst_pos):
    """Copy row ranges ``(src_row, dst_row, n_rows)`` from pool storage into the squeeze buffers.

    Returns the number of rows copied.
    """
    cdef Py_ssize_t r, src, dst, cnt, total = 0
    cdef Py_ssize_t lk = src_k.shape[1]
    cdef Py_ssize_t lv = src_v.shape[1]
    for r in range(n_runs):
        src = runs[r, 0]
        dst = runs[r, 1]
        cnt = runs[r, 2]
        if cnt <= 0:
            continue
        if lk:
            memcpy(&dst_k[dst, 0], &src_k[src, 0], cnt * lk * sizeof(double))
        if lv:
            memcpy(&dst_v[dst, 0], &src_v[src, 0], cnt * lv * sizeof(double))
        memcpy(&dst_pos[dst], &src_pos[src], cnt * sizeof(cnp.int64_t))
        total += cnt
    return total


def rope_inplace(double[:, ::1] x, const cnp.int64_t[::1] positions, Py_ssize_t n_rows,
                 int head_dim, double base):
    """Rotate adjacent pairs of every head in the first ``n_rows`` rows of ``x``."""
    cdef Py_ssize_t width = x.shape[1]
    cdef Py_ssize_t n_heads = width // head_dim
    cdef Py_ssize_t half = head_dim // 2
    cdef Py_ssize_t row, h, i, col
    cdef double theta, c, s, a, b, pos
    for row in range(n_rows):
        pos = <double>positions[row]
        if pos == 0.0:
            continue
        for i in range(half):
            theta = pos * pow(base, -2.0 * i / head_dim)
            c = cos(theta)
            s = sin(theta)
            for h in range(n_heads):
                col = h * head_dim + 2 * i
                a = x[row, col]
                b = x[row, col + 1]
                x[row, col] = a * c - b * s
                x[row, col + 1] = a * s + b * c
