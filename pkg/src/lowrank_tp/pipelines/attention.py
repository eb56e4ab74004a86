"""Rotary embedding and the reference softmax attention every path is checked against."""

import numpy as np

from .._backend import kernels
from ..errors import ConfigError, ShapeError


def apply_rope(x, positions, head_dim, rope_base=10000.0):
    """Rotate each adjacent pair of every head by ``pos * rope_base**(-2i/head_dim)``.

    ``x`` is ``(tokens, heads * head_dim)``; a rotated copy is returned.
    """
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    out = np.array(x, dtype=np.float64, order="C", copy=True)
    if out.ndim != 2 or out.shape[1] % head_dim:
        raise ShapeError(f"expected (tokens, heads*{head_dim}), got {out.shape}")
    pos = np.ascontiguousarray(positions, dtype=np.int64)
    if pos.shape != (out.shape[0],):
        raise ShapeError(f"{pos.shape[0]} positions for {out.shape[0]} tokens")
    if np.any(pos < 0):
        raise ShapeError("positions must be nonnegative")
    kernels.rope_inplace(out, pos, out.shape[0], head_dim, float(rope_base))
    return out


def kv_head_for(q_head, num_heads, num_kv_heads):
    return q_head * num_kv_heads // num_heads


def causal_mask(q_positions, k_positions):
    return np.asarray(k_positions)[None, :] <= np.asarray(q_positions)[:, None]


def self_attention_reference(q, k, v, num_heads, num_kv_heads, head_dim, q_positions=None, k_positions=None, causal=True):
    """Softmax attention over heads laid out as ``(tokens, heads * head_dim)``.

    Keys are visible to a query when their position does not exceed the
    query's. Without explicit positions the queries are taken to be the last
    ``len(q)`` tokens of the key sequence.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tq, tk = q.shape[0], k.shape[0]
    if q.shape[1] != num_heads * head_dim or k.shape[1] != num_kv_heads * head_dim or v.shape != k.shape:
        raise ShapeError(f"q {q.shape}, k {k.shape}, v {v.shape} do not match {num_heads}/{num_kv_heads} heads of {head_dim}")
    if num_heads % num_kv_heads:
        raise ShapeError("num_heads must be a multiple of num_kv_heads")
    if k_positions is None:
        k_positions = np.arange(tk)
    if q_positions is None:
        q_positions = np.arange(tk - tq, tk)
    allowed = causal_mask(q_positions, k_positions) if causal else np.ones((tq, tk), bool)

    qh = q.reshape(tq, num_heads, head_dim).transpose(1, 0, 2)
    kh = k.reshape(tk, num_kv_heads, head_dim).transpose(1, 0, 2)
    vh = v.reshape(tk, num_kv_heads, head_dim).transpose(1, 0, 2)
    kv_idx = [kv_head_for(g, num_heads, num_kv_heads) for g in range(num_heads)]
    kh = kh[kv_idx]
    vh = vh[kv_idx]

    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(head_dim)
    scores = np.where(allowed[None], scores, -np.inf)
    peak = scores.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    weights = np.exp(scores - peak)
    denom = weights.sum(axis=-1, keepdims=True)
    weights = np.divide(weights, denom, out=np.zeros_like(weights), where=denom > 0)
    out = weights @ vh
    return out.transpose(1, 0, 2).reshape(tq, num_heads * head_dim)


def attention_flops(num_heads, head_dim, q_positions, k_positions, causal=True):
    """Score plus weighted-sum multiply-adds: ``4 * head_dim`` per visible (query head, key) pair."""
    if causal:
        visible = int(causal_mask(q_positions, k_positions).sum())
    else:
        visible = len(q_positions) * len(k_positions)
    return 4 * head_dim * num_heads * visible
