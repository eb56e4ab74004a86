"""Block pool, block table and the instrumented arena cache buffers come from."""

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import CapacityError, ParameterError, PayloadError, SequenceLookupError


class BufferArena:
    """Hands out zeroed arrays and counts every allocation.

    Only cache storage and replay buffers are drawn from here; the counter
    is what the replay guard watches.
    """

    def __init__(self):
        self.allocations = 0
        self.names = []

    def empty(self, name, shape, dtype=np.float64):
        self.allocations += 1
        self.names.append(name)
        return np.zeros(shape, dtype=dtype)


class PagedCachePool:
    """Slot storage for per-token low-rank K/V vectors and their positions.

    Slot ``offset`` of block ``b`` lives at row ``b * block_size + offset`` of
    the flat ``k``/``v``/``pos`` arrays, so a run of physically consecutive
    blocks is one contiguous row range.
    """

    def __init__(self, num_blocks, block_size, l_k, l_v, arena=None):
        if num_blocks < 1 or block_size < 1:
            raise CapacityError("a pool needs at least one block of one slot")
        self.arena = arena if arena is not None else BufferArena()
        self.num_blocks = int(num_blocks)
        self.block_size = int(block_size)
        self.l_k = int(l_k)
        self.l_v = int(l_v)
        rows = self.num_blocks * self.block_size
        self.k = self.arena.empty("pool.k", (rows, self.l_k))
        self.v = self.arena.empty("pool.v", (rows, self.l_v))
        self.pos = self.arena.empty("pool.pos", (rows,), np.int64)

    def row(self, block, offset):
        return block * self.block_size + offset

    def write(self, row, k, v, position):
        k = np.asarray(k, dtype=np.float64).reshape(-1)
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if k.shape != (self.l_k,) or v.shape != (self.l_v,):
            raise PayloadError(f"payload dims ({k.size}, {v.size}) do not match pool ({self.l_k}, {self.l_v})")
        self.k[row] = k
        self.v[row] = v
        self.pos[row] = position

    def read_sequence(self, table, seq):
        rows = table.rows(seq)
        return self.k[rows], self.v[rows], self.pos[rows]


@dataclass(frozen=True)
class SlotRef:
    seq: object
    block: int
    offset: int
    row: int


class BlockTable:
    """Logical-to-physical block mapping per sequence plus the shared free list.

    Freed blocks go back to the front of the free list, so recently released
    blocks are reused first and allocation order drifts away from physical
    order as sequences come and go. ``version`` changes on every mutation so
    stale replay plans can be detected.
    """

    def __init__(self, num_blocks, block_size, free_order=None):
        self.num_blocks = int(num_blocks)
        self.block_size = int(block_size)
        order = list(range(self.num_blocks)) if free_order is None else [int(b) for b in free_order]
        if sorted(order) != list(range(self.num_blocks)):
            raise ParameterError("free_order must be a permutation of the block indices")
        self.free = deque(order)
        self.blocks = {}
        self.filled = {}
        self.version = 0

    def __contains__(self, seq):
        return seq in self.blocks

    @property
    def sequences(self):
        return list(self.blocks)

    def physical(self, seq):
        try:
            return list(self.blocks[seq])
        except KeyError:
            raise SequenceLookupError(f"unknown sequence {seq!r}") from None

    def num_tokens(self, seq):
        self.physical(seq)
        return self.filled[seq]

    def rows(self, seq):
        """Pool rows of the sequence's filled slots, in logical order."""
        blocks = self.physical(seq)
        n = self.filled[seq]
        bs = self.block_size
        return np.array([blocks[i // bs] * bs + i % bs for i in range(n)], dtype=np.int64)

    def add_sequence(self, seq):
        if seq not in self.blocks:
            self.blocks[seq] = []
            self.filled[seq] = 0
            self.version += 1

    def allocate_blocks(self, seq, count):
        if count > len(self.free):
            raise CapacityError(f"need {count} blocks, only {len(self.free)} free")
        self.add_sequence(seq)
        new = [self.free.popleft() for _ in range(count)]
        self.blocks[seq].extend(new)
        self.version += 1
        return new

    def reserve_slot(self, seq):
        self.add_sequence(seq)
        n = self.filled[seq]
        if n == len(self.blocks[seq]) * self.block_size:
            self.allocate_blocks(seq, 1)
        block = self.blocks[seq][n // self.block_size]
        offset = n % self.block_size
        self.filled[seq] = n + 1
        self.version += 1
        return SlotRef(seq, block, offset, block * self.block_size + offset)

    def free_sequence(self, seq):
        blocks = self.physical(seq)
        self.free.extendleft(reversed(blocks))
        del self.blocks[seq]
        del self.filled[seq]
        self.version += 1
        return blocks


def allocate_blocks(table, seq, blocks_needed):
    """Give ``seq`` the next ``blocks_needed`` blocks from the free list."""
    return table.allocate_blocks(seq, blocks_needed)


def append_kv(pool, table, seq, k_lowrank, v_lowrank, position):
    """Store one token's low-rank K/V in the next slot of ``seq``.

    ``pool`` may be a list of per-worker pools that all receive the payload.
    """
    pools = pool if isinstance(pool, (list, tuple)) else [pool]
    for p in pools:
        if np.size(k_lowrank) != p.l_k or np.size(v_lowrank) != p.l_v:
            raise PayloadError(f"payload dims ({np.size(k_lowrank)}, {np.size(v_lowrank)}) "
                               f"do not match pool ({p.l_k}, {p.l_v})")
    slot = table.reserve_slot(seq)
    for p in pools:
        p.write(slot.row, k_lowrank, v_lowrank, position)
    return slot
