"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle is written the slow, obvious way.
"""

import itertools
import math

import numpy as np


def triple_loop_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def singular_values(w):
    """LAPACK singular values, sorted non-increasing."""
    return np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)


def tail_energy(w, k):
    s = singular_values(w)
    return float(np.sum(s[k:] ** 2))


def tail_energy_eig(w, k):
    """Tail energy from the eigenvalues of the Gram matrix (second route)."""
    w = np.asarray(w, dtype=np.float64)
    g = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    ev = np.sort(np.clip(np.linalg.eigvalsh(g), 0, None))[::-1]
    return float(np.sum(ev[k:]))


def rope_rows(x, positions, head_dim, base=10000.0):
    out = np.array(x, dtype=np.float64, copy=True)
    for r, pos in enumerate(positions):
        for h in range(out.shape[1] // head_dim):
            for i in range(head_dim // 2):
                theta = pos * base ** (-2.0 * i / head_dim)
                c, s = math.cos(theta), math.sin(theta)
                j = h * head_dim + 2 * i
                a, b = out[r, j], out[r, j + 1]
                out[r, j] = a * c - b * s
                out[r, j + 1] = a * s + b * c
    return out


def summation_attention(q, k, v, num_heads, num_kv_heads, head_dim, q_pos=None, k_pos=None, causal=True):
    """Per-element softmax attention with explicit loops."""
    nq, nk = q.shape[0], k.shape[0]
    q_pos = list(range(nq)) if q_pos is None else list(q_pos)
    k_pos = list(range(nk)) if k_pos is None else list(k_pos)
    out = np.zeros((nq, num_heads * head_dim))
    scale = 1.0 / math.sqrt(head_dim)
    for h in range(num_heads):
        g = h * num_kv_heads // num_heads
        qs, ks = slice(h * head_dim, (h + 1) * head_dim), slice(g * head_dim, (g + 1) * head_dim)
        for i in range(nq):
            logits = []
            for j in range(nk):
                if causal and k_pos[j] > q_pos[i]:
                    continue
                dot = sum(q[i, qs][d] * k[j, ks][d] for d in range(head_dim))
                logits.append((j, dot * scale))
            top = max(x for _, x in logits)
            weights = [(j, math.exp(x - top)) for j, x in logits]
            z = sum(w for _, w in weights)
            for j, w in weights:
                out[i, qs] += (w / z) * v[j, ks]
    return out


def min_order_preserving_partition(physical):
    """Smallest number of pieces in an order-preserving split into ascending-by-one runs."""
    n = len(physical)
    if n == 0:
        return 0
    best = None
    for mask in itertools.product((False, True), repeat=n - 1):
        pieces = [[physical[0]]]
        for i, cut in enumerate(mask):
            if cut:
                pieces.append([physical[i + 1]])
            else:
                pieces[-1].append(physical[i + 1])
        if all(all(p[t + 1] == p[t] + 1 for t in range(len(p) - 1)) for p in pieces):
            best = len(pieces) if best is None else min(best, len(pieces))
    return best


def free_list_simulation(num_blocks, ops):
    """Replay ``("alloc", seq, n)`` / ``("free", seq)`` ops on a front-reuse free list."""
    free = list(range(num_blocks))
    owned = {}
    for op in ops:
        if op[0] == "alloc":
            _, seq, n = op
            owned.setdefault(seq, []).extend(free[:n])
            free = free[n:]
        else:
            free = owned.pop(op[1]) + free
    return owned
