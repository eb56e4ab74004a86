"""Parallel forward pipelines for attention and MLP blocks."""

from .attention import apply_rope, attention_flops, self_attention_reference
from .blocks import (
    ForwardTrace,
    forward_base_attention,
    forward_base_mlp,
    forward_deinfer_attention,
    forward_deinfer_mlp,
    forward_dense_tp_attention,
    forward_dense_tp_mlp,
    head_ranges,
    kv_head_ranges,
    shard_base_attention,
    shard_base_mlp,
    shard_deinfer_attention,
    shard_deinfer_mlp,
    shard_dense_attention,
    shard_dense_mlp,
)
from .config import AttentionVariant, MLPVariant, ModelConfig
from .model import MODES, TPModel, ToyWeights, lossless_plan, random_weights, reference_forward
from .reference import attention_reference, mlp_reference
