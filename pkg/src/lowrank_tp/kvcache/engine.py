"""Batched prefill/decode over a :class:`TPModel` with the paged low-rank cache.

The block table is shared scheduling state; each worker owns its pools, its
fixed buffers (one set per layer) and its replay guard. Every worker stores
the full low-rank cache, since the gathered low-rank K/V rows are identical
everywhere, and reconstructs only its own kv-head shard.
"""

import numpy as np

from ..errors import ConfigError
from ..pipelines.attention import apply_rope
from ..pipelines.blocks import kv_head_ranges
from .pool import BlockTable, BufferArena, PagedCachePool
from .replay import (
    FixedBuffers,
    ReplayGuard,
    RopeSpec,
    gather_sequence,
    paged_attention_reference,
    prepare_replay,
    replay_reconstruct,
)


class _Worker:
    def __init__(self, session, rank):
        cfg = session.config
        p = session.model.group.world_size
        self.arena = BufferArena()
        self.guard = ReplayGuard(self.arena)
        kv_lo, kv_hi = kv_head_ranges(cfg, p)[rank]
        q_width = cfg.hidden_dim // p
        self.pools = []
        self.buffers = []
        for lq, lk, lv, _ in session.layer_ranks:
            self.pools.append(PagedCachePool(session.num_blocks, session.block_size, lk, lv, self.arena))
            self.buffers.append(FixedBuffers(self.arena, session.max_tokens, session.block_size, lk, lv,
                                             kv_hi - kv_lo, session.max_seqs, session.max_query_rows, q_width))


class LayerCache:
    """Cache handle for one layer, consumed by ``forward_deinfer_attention``."""

    def __init__(self, session, layer):
        self.session = session
        self.layer = layer

    def store(self, k_lowrank, v_lowrank):
        n = k_lowrank.shape[0]
        for w in self.session.workers:
            buf = w.buffers[self.layer]
            pool = w.pools[self.layer]
            rows = buf.slot_rows[:n]
            if w.guard.mode == "replay":
                w.guard.record("kv_write", pool.k, pool.v, pool.pos, buf.slot_rows, buf.query_pos)
            pool.k[rows] = k_lowrank
            pool.v[rows] = v_lowrank
            pool.pos[rows] = buf.query_pos[:n]

    def attend(self, worker, q_local, k_up, v_up, tracer):
        s = self.session
        cfg = s.config
        w = s.workers[worker]
        buf = w.buffers[self.layer]
        guard = w.guard if w.guard.mode == "replay" else None
        rope = RopeSpec(cfg.head_dim, cfg.rope_base) if cfg.use_rope else None
        replay_reconstruct(buf, _Eager() if guard is None else guard, w.pools[self.layer], k_up, v_up, rope, s.table)
        p = s.model.group.world_size
        out, flops = paged_attention_reference(q_local, buf, cfg.num_heads // p, max(cfg.num_kv_heads // p, 1),
                                               cfg.head_dim, guard)
        tracer.trace.attention_flops[worker] += flops
        return out


class _Eager:
    """Stand-in guard for steps run outside a replay window (prefill)."""

    mode = "preparation"

    def record(self, *args):
        pass


class PagedDecodeSession:
    """Drive a deinfer-mode :class:`TPModel` through prefill and decode steps.

    ``free_order`` seeds the block free list, which is how tests scramble the
    physical placement of blocks.
    """

    def __init__(self, model, block_size=4, num_blocks=64, max_tokens=256, max_seqs=4,
                 max_query_rows=None, free_order=None):
        if model.mode != "deinfer":
            raise ConfigError("the paged low-rank cache needs a deinfer-mode model")
        self.model = model
        self.config = model.config
        self.block_size = block_size
        self.num_blocks = num_blocks
        self.max_tokens = max_tokens
        self.max_seqs = max_seqs
        self.max_query_rows = max_query_rows or max_tokens
        self.layer_ranks = [att.ranks for att, _ in model.shards]
        self.table = BlockTable(num_blocks, block_size, free_order)
        self.workers = [_Worker(self, r) for r in model.group.ranks]
        self.caches = [LayerCache(self, i) for i in range(len(model.shards))]
        self.history = {}
        self.signature_log = []
        self.last_plan = None

    def _prepare(self, batch):
        seqs, tokens, positions, slots = [], [], [], []
        for seq, toks in batch.items():
            self.table.add_sequence(seq)
            hist = self.history.setdefault(seq, [])
            for tok in toks:
                slot = self.table.reserve_slot(seq)
                seqs.append(seq)
                positions.append(len(hist))
                tokens.append(tok)
                slots.append(slot.row)
                hist.append(tok)
        plan = prepare_replay(self.table, list(batch), self.workers[0].buffers[0].capacity_blocks, self.max_tokens)
        for w in self.workers:
            for buf in w.buffers:
                buf.load_plan(plan, seqs, positions, slots)
        self.last_plan = plan
        return plan, seqs, np.array(tokens, dtype=np.int64), np.array(positions, dtype=np.int64)

    def step(self, batch, replay=True):
        """Run one step; ``batch`` maps sequence id to the new tokens for it.

        Returns ``(logits by sequence, trace, plan)``; logits rows follow the
        order of that sequence's new tokens. With ``replay`` the forward runs
        inside every worker's replay window.
        """
        plan, seqs, tokens, positions = self._prepare(batch)
        if replay:
            for w in self.workers:
                w.guard.begin()
        try:
            logits, trace = self.model.forward(tokens, positions, self.caches)
        except BaseException:
            for w in self.workers:
                w.guard.mode = "preparation"
            raise
        if replay:
            for w in self.workers:
                w.guard.end()
            self.signature_log.append([list(w.guard.current) for w in self.workers])
        out = {}
        seq_arr = np.array(seqs, dtype=object)
        for seq in batch:
            out[seq] = logits[seq_arr == seq]
        return out, trace, plan

    def prefill(self, prompts):
        return self.step(prompts, replay=False)

    def decode(self, next_tokens):
        return self.step({seq: [tok] for seq, tok in next_tokens.items()}, replay=True)

    def free(self, seq):
        self.table.free_sequence(seq)
        self.history.pop(seq, None)

    def buffer_identities(self):
        return [tuple(b.identity() for b in w.buffers) for w in self.workers]

    def reconstruction_error(self):
        """Max abs gap between reconstructed K/V rows and ``lowrank @ up`` for every cached token.

        Keys are compared after rotation when the model uses RoPE. Covers the
        sequences of the most recent step.
        """
        cfg = self.config
        worst = 0.0
        for rank, w in enumerate(self.workers):
            for layer, (buf, pool) in enumerate(zip(w.buffers, w.pools)):
                k_up, v_up = self.model.shards[layer][0].qkv_up.local(rank)[1:]
                for i, seq in enumerate(self.last_plan.order):
                    rows = self.table.rows(seq)
                    hist = gather_sequence(buf, i)
                    want_k = pool.k[rows] @ k_up
                    if cfg.use_rope:
                        want_k = apply_rope(want_k, pool.pos[rows], cfg.head_dim, cfg.rope_base)
                    want_v = pool.v[rows] @ v_up
                    worst = max(worst, float(np.abs(buf.recon_k[hist] - want_k).max(initial=0.0)),
                                float(np.abs(buf.recon_v[hist] - want_v).max(initial=0.0)))
        return worst
