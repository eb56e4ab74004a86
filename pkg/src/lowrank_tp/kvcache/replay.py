"""Two-stage reconstruction of the paged low-rank KV cache.

Preparation stage (anything goes): scan each sequence's block list for runs
of physically consecutive blocks, pack the sequences into the squeeze buffer
and derive the remapping index list, then write those descriptors into
fixed-address tables.

Replay stage (fixed arguments only): copy runs into the squeeze buffer,
multiply by the up factors into the reconstruction buffer at full capacity,
rotate keys in place, and run attention with the remapping list as the block
table. :class:`ReplayGuard` checks that no cache buffer is allocated and that
every operation's signature (kind, buffer addresses, shapes) matches the
first captured replay.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .._backend import kernels
from ..errors import CapacityError, ReplayError
from ..pipelines.attention import attention_flops, self_attention_reference

PREPARATION = "preparation"
REPLAY = "replay"


@dataclass(frozen=True)
class Run:
    seq: object
    physical_start: int
    length: int
    buffer_offset: int
    tokens: int


@dataclass
class ReplayPlan:
    runs: list
    remapping: dict
    seq_lens: dict
    order: list
    active_tokens: int
    active_blocks: int
    table_version: int


def scan_contiguous_runs(table, seq):
    """Maximal runs ``(physical_start, length)`` of ``seq``'s blocks, in logical order."""
    physical = np.asarray(table.physical(seq), dtype=np.int64)
    return [(int(s), int(n)) for s, n in kernels.scan_runs(physical)]


def build_remapping_index(block_counts, capacity_blocks):
    """Pack sequences back to back in the buffer.

    ``block_counts`` maps each sequence (in batch order) to its number of
    blocks, or to its list of ``(start, length)`` runs.
    """
    remap = {}
    offset = 0
    for seq, count in block_counts.items():
        if not isinstance(count, (int, np.integer)):
            count = sum(length for _, length in count)
        remap[seq] = list(range(offset, offset + count))
        offset += count
    if offset > capacity_blocks:
        raise CapacityError(f"batch needs {offset} buffer blocks, capacity is {capacity_blocks}")
    return remap


def prepare_replay(table, seqs, capacity_blocks, max_tokens=None):
    """Preparation stage for one step over the sequences ``seqs``."""
    runs_by_seq = {seq: scan_contiguous_runs(table, seq) for seq in seqs}
    remap = build_remapping_index(runs_by_seq, capacity_blocks)
    bs = table.block_size
    runs = []
    lens = {}
    for seq in seqs:
        n_tok = table.num_tokens(seq)
        lens[seq] = n_tok
        logical = 0
        for start, length in runs_by_seq[seq]:
            tokens = max(0, min(length * bs, n_tok - logical * bs))
            runs.append(Run(seq, start, length, remap[seq][logical], tokens))
            logical += length
    total = sum(lens.values())
    if max_tokens is not None and total > max_tokens:
        raise CapacityError(f"{total} live tokens exceed buffer capacity {max_tokens}")
    return ReplayPlan(runs, remap, lens, list(seqs), total, sum(len(v) for v in remap.values()), table.version)


class FixedBuffers:
    """Squeeze and reconstruction buffers plus fixed descriptor tables.

    Everything is allocated here, once. ``capacity_blocks`` leaves room for
    one partially filled block per sequence on top of ``max_tokens``.
    """

    def __init__(self, arena, max_tokens, block_size, l_k, l_v, kv_width, max_seqs=8,
                 max_query_rows=None, q_width=0):
        self.arena = arena
        self.block_size = int(block_size)
        self.max_tokens = int(max_tokens)
        self.max_seqs = int(max_seqs)
        self.capacity_blocks = math.ceil(max_tokens / block_size) + max_seqs
        self.capacity_rows = self.capacity_blocks * self.block_size
        self.max_query_rows = int(max_query_rows or max_tokens)
        rows = self.capacity_rows
        self.squeeze_k = arena.empty("squeeze.k", (rows, l_k))
        self.squeeze_v = arena.empty("squeeze.v", (rows, l_v))
        self.squeeze_pos = arena.empty("squeeze.pos", (rows,), np.int64)
        self.recon_k = arena.empty("recon.k", (rows, kv_width))
        self.recon_v = arena.empty("recon.v", (rows, kv_width))
        self.run_table = arena.empty("runs", (self.capacity_blocks, 3), np.int64)
        self.remap_table = arena.empty("remap", (self.max_seqs, self.capacity_blocks), np.int64)
        self.seq_lens = arena.empty("seq_lens", (self.max_seqs,), np.int64)
        # counts: [n_runs, n_seqs, n_query_rows, active_blocks]
        self.counts = arena.empty("counts", (4,), np.int64)
        self.slot_rows = arena.empty("slot_rows", (self.max_query_rows,), np.int64)
        self.query_seq = arena.empty("query_seq", (self.max_query_rows,), np.int64)
        self.query_pos = arena.empty("query_pos", (self.max_query_rows,), np.int64)
        self.query = arena.empty("query", (self.max_query_rows, q_width)) if q_width else None
        self.out = arena.empty("attn_out", (self.max_query_rows, q_width)) if q_width else None
        self.loaded_version = None
        self.reconstructed_version = None
        self.copied_rows = 0
        self.copy_calls = 0

    def identity(self):
        """Data addresses of every fixed buffer; constant for the buffers' lifetime."""
        names = ("squeeze_k", "squeeze_v", "squeeze_pos", "recon_k", "recon_v", "run_table",
                 "remap_table", "seq_lens", "counts", "slot_rows", "query_seq", "query_pos", "query", "out")
        return tuple(getattr(self, n).ctypes.data if getattr(self, n) is not None else 0 for n in names)

    def load_plan(self, plan, query_seqs=(), query_positions=(), slot_rows=()):
        """Preparation stage: write a plan's descriptors into the fixed tables."""
        if len(plan.order) > self.max_seqs:
            raise CapacityError(f"{len(plan.order)} sequences exceed max_seqs {self.max_seqs}")
        if plan.active_blocks > self.capacity_blocks or plan.active_tokens > self.max_tokens:
            raise CapacityError("plan does not fit the fixed buffers")
        if len(query_seqs) > self.max_query_rows:
            raise CapacityError(f"{len(query_seqs)} query rows exceed {self.max_query_rows}")
        bs = self.block_size
        n = len(plan.runs)
        for i, r in enumerate(plan.runs):
            self.run_table[i] = (r.physical_start * bs, r.buffer_offset * bs, r.tokens)
        seq_index = {seq: i for i, seq in enumerate(plan.order)}
        for i, seq in enumerate(plan.order):
            blocks = plan.remapping[seq]
            self.remap_table[i, :len(blocks)] = blocks
            self.seq_lens[i] = plan.seq_lens[seq]
        nq = len(query_seqs)
        self.query_seq[:nq] = [seq_index[s] for s in query_seqs]
        self.query_pos[:nq] = query_positions
        self.slot_rows[:len(slot_rows)] = slot_rows
        self.counts[:] = (n, len(plan.order), nq, plan.active_blocks)
        self.loaded_version = plan.table_version
        self.reconstructed_version = None


class ReplayGuard:
    """Allocation counter and operation-signature recorder for the replay window."""

    def __init__(self, arena):
        self.arena = arena
        self.mode = PREPARATION
        self.captured = None
        self.current = []
        self.replays = 0
        self.allocations_in_replay = 0
        self._start = 0

    def begin(self):
        if self.mode == REPLAY:
            raise ReplayError("replay window already open")
        self.mode = REPLAY
        self.current = []
        self._start = self.arena.allocations

    def end(self):
        if self.mode != REPLAY:
            raise ReplayError("no replay window is open")
        self.mode = PREPARATION
        grown = self.arena.allocations - self._start
        self.allocations_in_replay += grown
        if grown:
            raise ReplayError(f"{grown} buffer allocation(s) during replay")
        if self.captured is None:
            self.captured = list(self.current)
        elif len(self.current) != len(self.captured):
            raise ReplayError(f"replay ran {len(self.current)} ops, capture has {len(self.captured)}")
        self.replays += 1

    @contextmanager
    def replay(self):
        self.begin()
        try:
            yield self
        except BaseException:
            self.mode = PREPARATION
            raise
        self.end()

    def record(self, kind, *arrays):
        if self.mode != REPLAY:
            raise ReplayError(f"{kind} may only run inside the replay window")
        sig = (kind,) + tuple((a.ctypes.data, a.shape, a.dtype.str) for a in arrays)
        i = len(self.current)
        if self.captured is not None:
            if i >= len(self.captured) or self.captured[i] != sig:
                raise ReplayError(f"operation {i} ({kind}) does not match the captured signature")
        self.current.append(sig)


@dataclass(frozen=True)
class RopeSpec:
    head_dim: int
    base: float = 10000.0


def replay_reconstruct(buffers, guard, pool, k_up, v_up, rope=None, table=None):
    """Replay stage: squeeze the cache, reconstruct K/V at full capacity, rotate K in place.

    Returns views of the first ``active_blocks * block_size`` rows of the
    reconstruction buffers.
    """
    if buffers.loaded_version is None:
        raise ReplayError("no plan loaded; run the preparation stage first")
    if table is not None and table.version != buffers.loaded_version:
        raise ReplayError("block table changed since the plan was prepared")
    k_up = np.ascontiguousarray(k_up)
    v_up = np.ascontiguousarray(v_up)
    n_runs = int(buffers.counts[0])
    guard.record("squeeze_copy", pool.k, pool.v, pool.pos, buffers.run_table, buffers.squeeze_k,
                 buffers.squeeze_v, buffers.squeeze_pos)
    copied = kernels.squeeze_copy(pool.k, pool.v, pool.pos, buffers.run_table, n_runs,
                                  buffers.squeeze_k, buffers.squeeze_v, buffers.squeeze_pos)
    buffers.copied_rows = int(copied)
    buffers.copy_calls = n_runs
    guard.record("gemm_k", buffers.squeeze_k, k_up, buffers.recon_k)
    np.matmul(buffers.squeeze_k, k_up, out=buffers.recon_k)
    guard.record("gemm_v", buffers.squeeze_v, v_up, buffers.recon_v)
    np.matmul(buffers.squeeze_v, v_up, out=buffers.recon_v)
    if rope is not None:
        guard.record("rope_inplace", buffers.recon_k, buffers.squeeze_pos)
        kernels.rope_inplace(buffers.recon_k, buffers.squeeze_pos, buffers.capacity_rows,
                             rope.head_dim, float(rope.base))
    buffers.reconstructed_version = buffers.loaded_version
    active = int(buffers.counts[3]) * buffers.block_size
    return buffers.recon_k[:active], buffers.recon_v[:active]


def gather_sequence(buffers, seq_index):
    """Buffer rows of one sequence via the remapping table, in logical order."""
    bs = buffers.block_size
    n_tok = int(buffers.seq_lens[seq_index])
    n_blocks = -(-n_tok // bs)
    blocks = buffers.remap_table[seq_index, :n_blocks]
    return (blocks[:, None] * bs + np.arange(bs)[None, :]).reshape(-1)[:n_tok]


def paged_attention_reference(query, buffers, num_heads, num_kv_heads, head_dim, guard=None):
    """Causal attention of each query row over its sequence's reconstructed history.

    ``num_heads``/``num_kv_heads`` are the local (per-worker) head counts.
    Query rows, their sequences and positions come from the fixed tables
    written in the preparation stage. Returns ``(output rows, flops)``.
    """
    if buffers.reconstructed_version is None or buffers.reconstructed_version != buffers.loaded_version:
        raise ReplayError("stale plan: reconstruction has not run for the loaded plan")
    nq = int(buffers.counts[2])
    query = np.asarray(query, dtype=np.float64)
    if query.shape[0] != nq:
        raise ReplayError(f"{query.shape[0]} query rows, plan expects {nq}")
    out = buffers.out if buffers.out is not None and buffers.out.shape[1] == query.shape[1] else None
    if guard is not None:
        if out is None or buffers.query is None:
            raise ReplayError("buffers were built without query/output space")
        guard.record("paged_attention", buffers.query, buffers.recon_k, buffers.recon_v, buffers.remap_table,
                     buffers.seq_lens, buffers.query_seq, buffers.query_pos, buffers.out)
        buffers.query[:nq] = query
        query = buffers.query[:nq]
    result = out[:nq] if out is not None else np.empty_like(query)
    flops = 0
    qseq = buffers.query_seq[:nq]
    qpos = buffers.query_pos[:nq]
    for s in np.unique(qseq):
        rows = np.nonzero(qseq == s)[0]
        hist = gather_sequence(buffers, int(s))
        kpos = buffers.squeeze_pos[hist]
        k = buffers.recon_k[hist]
        v = buffers.recon_v[hist]
        result[rows] = self_attention_reference(query[rows], k, v, num_heads, num_kv_heads, head_dim,
                                                qpos[rows], kpos)
        flops += attention_flops(num_heads, head_dim, qpos[rows], kpos)
    return result, flops
