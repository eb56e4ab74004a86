"""A small decoder stack built from the parallel blocks.

Each layer is ``h += attn(norm(h)); h += mlp(norm(h))`` with a weightless
RMS norm, followed by a final norm and an LM head.
"""

from dataclasses import dataclass

import numpy as np

from ..decomposition import DecompositionPlan, decompose_model
from ..errors import ConfigError
from ..parallel import WorkerGroup
from . import blocks
from .blocks import ForwardTrace
from .reference import attention_reference, mlp_reference

MODES = ("dense", "base", "deinfer")


def rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


@dataclass
class ToyWeights:
    embedding: np.ndarray
    layers: list
    lm_head: np.ndarray

    @property
    def vocab_size(self):
        return self.embedding.shape[0]


def random_weights(config, vocab_size=32, seed=0):
    """Gaussian weights scaled by ``1/sqrt(fan_in)`` from a seeded PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h = config.hidden_dim
    layers = []
    for _ in range(config.num_layers):
        layers.append({name: rng.standard_normal(shape) / np.sqrt(shape[0])
                       for name, shape in config.matrix_shapes().items()})
    return ToyWeights(
        embedding=rng.standard_normal((vocab_size, h)),
        lm_head=rng.standard_normal((h, vocab_size)) / np.sqrt(h),
        layers=layers,
    )


class TPModel:
    """Toy decoder executed by a :class:`WorkerGroup` in one of three modes.

    ``layers`` holds dense weight dicts for ``mode="dense"`` and factor-pair
    dicts otherwise.
    """

    def __init__(self, config, weights, layers, mode, group):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.config = config
        self.weights = weights
        self.mode = mode
        self.group = group if isinstance(group, WorkerGroup) else WorkerGroup(group)
        g = self.group
        if mode == "dense":
            self.shards = [(blocks.shard_dense_attention(config, lw, g), blocks.shard_dense_mlp(config, lw, g))
                           for lw in layers]
        elif mode == "base":
            self.shards = [(blocks.shard_base_attention(config, lw, g), blocks.shard_base_mlp(config, lw, g))
                           for lw in layers]
        else:
            self.shards = [(blocks.shard_deinfer_attention(config, lw, g), blocks.shard_deinfer_mlp(config, lw, g))
                           for lw in layers]

    @classmethod
    def build(cls, config, weights, mode, world_size, plan=None):
        """Decompose ``weights`` with ``plan`` (unless dense) and shard over ``world_size`` workers."""
        if mode == "dense":
            layers = weights.layers
        else:
            if plan is None:
                raise ConfigError("decomposed modes need a DecompositionPlan")
            layers = decompose_model(weights.layers, plan).factors
        return cls(config, weights, layers, mode, WorkerGroup(world_size))

    def _attention(self, i, x, positions, cache):
        sh = self.shards[i][0]
        prefix = f"layer{i}."
        if self.mode == "dense":
            return blocks.forward_dense_tp_attention(self.config, sh, x, self.group, positions, prefix)
        if self.mode == "base":
            return blocks.forward_base_attention(self.config, sh, x, self.group, positions, prefix)
        return blocks.forward_deinfer_attention(self.config, sh, x, self.group, positions, cache, prefix)

    def _mlp(self, i, x):
        sh = self.shards[i][1]
        fn = {"dense": blocks.forward_dense_tp_mlp, "base": blocks.forward_base_mlp,
              "deinfer": blocks.forward_deinfer_mlp}[self.mode]
        return fn(self.config, sh, x, self.group, f"layer{i}.")

    def hidden_forward(self, x, positions=None, caches=None):
        trace = ForwardTrace.empty(self.group.world_size)
        for i in range(len(self.shards)):
            if caches is not None and self.mode != "deinfer":
                raise ConfigError("the paged low-rank cache is only wired into the deinfer pipeline")
            a, tr = self._attention(i, rms_norm(x), positions, None if caches is None else caches[i])
            trace.merge(tr)
            x = x + a
            m, tr = self._mlp(i, rms_norm(x))
            trace.merge(tr)
            x = x + m
        return x, trace

    def forward(self, tokens, positions=None, caches=None):
        x = self.weights.embedding[np.asarray(tokens, dtype=np.int64)]
        h, trace = self.hidden_forward(x, positions, caches)
        return rms_norm(h) @ self.weights.lm_head, trace


def reference_forward(config, weights, layers, tokens, positions=None):
    """Unsharded forward over dense or factor-pair layers."""
    x = weights.embedding[np.asarray(tokens, dtype=np.int64)]
    for lw in layers:
        x = x + attention_reference(config, lw, rms_norm(x), positions)
        x = x + mlp_reference(config, lw, rms_norm(x))
    return rms_norm(x) @ weights.lm_head


def lossless_plan(config):
    shapes = config.matrix_shapes()
    return DecompositionPlan.uniform({n: min(s) for n, s in shapes.items()}, config.num_layers)
