"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built or when ``LOWRANK_TP_PURE=1`` is set.
"""

import math

import numpy as np


def jacobi_sweeps(g, v, tol, max_sweeps):
    n = g.shape[0]
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            gi = g[i]
            for j in range(i + 1, n):
                gj = g[j]
                alpha = float(gi @ gi)
                beta = float(gj @ gj)
                gamma = float(gi @ gj)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                a = gi.copy()
                gi[:] = c * a - s * gj
                gj[:] = s * a + c * gj
                a = v[i].copy()
                v[i] = c * a - s * v[j]
                v[j] = s * a + c * v[j]
        if not rotated:
            return sweep + 1, True
    return max_sweeps, False


def scan_runs(physical):
    runs = []
    for idx in physical:
        idx = int(idx)
        if runs and idx == runs[-1][0] + runs[-1][1]:
            runs[-1][1] += 1
        else:
            runs.append([idx, 1])
    return np.array(runs, dtype=np.int64).reshape(-1, 2)


def squeeze_copy(src_k, src_v, src_pos, runs, n_runs, dst_k, dst_v, dst_pos):
    total = 0
    for src, dst, cnt in runs[:n_runs]:
        if cnt <= 0:
            continue
        dst_k[dst:dst + cnt] = src_k[src:src + cnt]
        dst_v[dst:dst + cnt] = src_v[src:src + cnt]
        dst_pos[dst:dst + cnt] = src_pos[src:src + cnt]
        total += int(cnt)
    return total


def rope_inplace(x, positions, n_rows, head_dim, base):
    if n_rows == 0:
        return
    half = head_dim // 2
    rows = x[:n_rows].reshape(n_rows, -1, half, 2)
    inv_freq = np.array([base ** (-2.0 * i / head_dim) for i in range(half)])
    theta = positions[:n_rows, None].astype(np.float64) * inv_freq[None, :]
    c = np.cos(theta)[:, None, :]
    s = np.sin(theta)[:, None, :]
    a = rows[..., 0].copy()
    b = rows[..., 1].copy()
    rows[..., 0] = a * c - b * s
    rows[..., 1] = a * s + b * c
