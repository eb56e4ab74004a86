"""Single-worker forwards with no sharding and no collectives.

These are the oracles the parallel pipelines are compared against. A block's
weights are either dense arrays or :class:`~lowrank_tp.decomposition.FactorPair`
objects; pairs are applied as two successive products.
"""

import numpy as np

from ..decomposition import FactorPair
from .attention import apply_rope, self_attention_reference


def _apply(x, w):
    if isinstance(w, FactorPair):
        return (x @ w.down) @ w.up
    return x @ w


def attention_reference(config, weights, x, positions=None):
    pos = np.arange(x.shape[0]) if positions is None else np.asarray(positions)
    q, k, v = (_apply(x, weights[n]) for n in ("q", "k", "v"))
    if config.use_rope:
        q = apply_rope(q, pos, config.head_dim, config.rope_base)
        k = apply_rope(k, pos, config.head_dim, config.rope_base)
    attn = self_attention_reference(q, k, v, config.num_heads, config.num_kv_heads, config.head_dim, pos, pos)
    return _apply(attn, weights["o"])


def mlp_reference(config, weights, x):
    up = _apply(x, weights["up"])
    if config.glu:
        gate = _apply(x, weights["gate"])
        act = gate / (1.0 + np.exp(-gate)) * up
    else:
        act = np.maximum(up, 0.0)
    return _apply(act, weights["down"])
