"""Paged low-rank KV cache with preparation/replay reconstruction."""

from .engine import LayerCache, PagedDecodeSession
from .pool import BlockTable, BufferArena, PagedCachePool, SlotRef, allocate_blocks, append_kv
from .replay import (
    PREPARATION,
    REPLAY,
    FixedBuffers,
    ReplayGuard,
    ReplayPlan,
    RopeSpec,
    Run,
    build_remapping_index,
    gather_sequence,
    paged_attention_reference,
    prepare_replay,
    replay_reconstruct,
    scan_contiguous_runs,
)
