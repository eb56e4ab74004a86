"""Lockstep simulation of a tensor-parallel worker group.

Workers are logical: each keeps private state, and the only way data moves
between them is through :func:`all_gather` and :func:`reduce_sum`, which are
barriers and are metered in a :class:`TrafficLedger`.

Volumes follow the per-token element convention: an all-gather whose result
is ``n`` wide costs ``n``; a reduce-sum over ``n`` elements costs ``2n``.
A group of one worker runs collectives as identities and records nothing.
"""

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CollectiveError, ParameterError, PartitionError, ShapeError

ALL_GATHER = "all_gather"
REDUCE_SUM = "reduce_sum"


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    tag: str
    width: int
    tokens: int
    volume_per_token: int

    @property
    def volume(self):
        return self.volume_per_token * self.tokens


@dataclass
class TrafficLedger:
    entries: list = field(default_factory=list)

    def record(self, kind, tag, width, tokens):
        per_token = width if kind == ALL_GATHER else 2 * width
        self.entries.append(LedgerEntry(kind, tag, int(width), int(tokens), per_token))

    def mark(self):
        return len(self.entries)

    def since(self, mark):
        return TrafficLedger(list(self.entries[mark:]))

    def count(self, kind=None):
        return sum(1 for e in self.entries if kind is None or e.kind == kind)

    def volume(self, kind=None):
        return sum(e.volume for e in self.entries if kind is None or e.kind == kind)

    def volume_per_token(self, kind=None):
        return sum(e.volume_per_token for e in self.entries if kind is None or e.kind == kind)

    def by_tag(self):
        """Per-token volume summed per tag."""
        out = Counter()
        for e in self.entries:
            out[e.tag] += e.volume_per_token
        return dict(out)

    def summary(self):
        return {
            "all_gather_calls": self.count(ALL_GATHER),
            "reduce_sum_calls": self.count(REDUCE_SUM),
            "all_gather_volume": self.volume(ALL_GATHER),
            "reduce_sum_volume": self.volume(REDUCE_SUM),
            "total_volume": self.volume(),
        }


class WorkerGroup:
    def __init__(self, world_size):
        if int(world_size) < 1:
            raise ParameterError(f"world size must be >= 1, got {world_size}")
        self.world_size = int(world_size)
        self.ledger = TrafficLedger()
        self.step = 0
        self.state = [dict() for _ in range(self.world_size)]

    @property
    def ranks(self):
        return range(self.world_size)

    def __repr__(self):
        return f"WorkerGroup(world_size={self.world_size}, step={self.step})"


def _check_locals(group, local):
    if len(local) != group.world_size:
        raise CollectiveError(f"expected {group.world_size} contributions, got {len(local)}")
    arrays = [np.asarray(x, dtype=np.float64) for x in local]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise CollectiveError(f"contribution shapes differ across workers: {sorted(shapes)}")
    return arrays


def _tokens(a):
    return 1 if a.ndim == 1 else int(np.prod(a.shape[:-1]))


def all_gather(group, local, tag="all_gather"):
    """Concatenate per-worker contributions along the last axis, in rank order."""
    arrays = _check_locals(group, local)
    group.step += 1
    if group.world_size == 1:
        return [arrays[0].copy()]
    full = np.concatenate(arrays, axis=-1)
    group.ledger.record(ALL_GATHER, tag, full.shape[-1], _tokens(full))
    return [full.copy() for _ in group.ranks]


def reduce_sum(group, local, tag="reduce_sum"):
    """Elementwise sum of per-worker contributions, delivered to every worker."""
    arrays = _check_locals(group, local)
    group.step += 1
    if group.world_size == 1:
        return [arrays[0].copy()]
    total = arrays[0].copy()
    for a in arrays[1:]:
        total += a
    group.ledger.record(REDUCE_SUM, tag, total.shape[-1], _tokens(total))
    return [total.copy() for _ in group.ranks]


class Scheme(str, Enum):
    CONCAT_SPLIT = "concat_split"
    COLUMN_SHARD = "column_shard"
    ROW_PARALLEL = "row_parallel"
    REPLICATED = "replicated"


@dataclass(frozen=True)
class ShardSpec:
    """Partition scheme plus, per worker, the owned range of each listed matrix.

    ``ranges[w][i]`` is ``(start, stop)`` along the partitioned axis of matrix
    ``i`` for worker ``w``. For ``CONCAT_SPLIT`` there is a single range over
    the concatenated output axis.
    """

    scheme: Scheme
    ranges: tuple


@dataclass
class ShardedMatrix:
    spec: ShardSpec
    shards: list
    originals_shapes: tuple

    def local(self, worker):
        return self.shards[worker]

    def reassemble(self):
        """Rebuild the original matrices from the shards."""
        spec = self.spec
        if spec.scheme is Scheme.REPLICATED:
            return [m.copy() for m in self.shards[0]]
        if spec.scheme is Scheme.CONCAT_SPLIT:
            full = np.concatenate(self.shards, axis=1)
            bounds = np.cumsum([0] + [s[1] for s in self.originals_shapes])
            return [full[:, bounds[i]:bounds[i + 1]].copy() for i in range(len(bounds) - 1)]
        axis = 1 if spec.scheme is Scheme.COLUMN_SHARD else 0
        out = []
        for i, shape in enumerate(self.originals_shapes):
            m = np.empty(shape)
            for w, shard in enumerate(self.shards):
                start, stop = spec.ranges[w][i]
                if axis == 1:
                    m[:, start:stop] = shard[i]
                else:
                    m[start:stop, :] = shard[i]
            out.append(m)
        return out


def even_ranges(size, p, what="dimension"):
    if size % p:
        raise PartitionError(f"{what} {size} is not divisible by {p} workers")
    step = size // p
    return [(w * step, (w + 1) * step) for w in range(p)]


def partition(matrices, scheme, group, ranges=None):
    """Split ``matrices`` across ``group`` under ``scheme``.

    ``CONCAT_SPLIT`` concatenates all matrices' columns and hands each worker
    one equal contiguous slab (one array per worker). ``COLUMN_SHARD`` and
    ``ROW_PARALLEL`` give each worker its slice of every matrix (a list per
    worker); explicit ``ranges`` (per worker, per matrix) override the even
    split, e.g. for replicated KV heads. ``REPLICATED`` copies everything.
    """
    scheme = Scheme(scheme)
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise ShapeError("nothing to partition")
    p = group.world_size if isinstance(group, WorkerGroup) else int(group)
    shapes = tuple(m.shape for m in mats)

    if scheme is Scheme.REPLICATED:
        spec = ShardSpec(scheme, tuple(tuple((0, s[1]) for s in shapes) for _ in range(p)))
        return ShardedMatrix(spec, [[m.copy() for m in mats] for _ in range(p)], shapes)

    if scheme is Scheme.CONCAT_SPLIT:
        rows = {m.shape[0] for m in mats}
        if len(rows) != 1:
            raise ShapeError(f"concat-split needs a common input dimension, got {sorted(rows)}")
        full = np.concatenate(mats, axis=1)
        r = even_ranges(full.shape[1], p, "concatenated output dimension")
        spec = ShardSpec(scheme, tuple((rg,) for rg in r))
        return ShardedMatrix(spec, [np.ascontiguousarray(full[:, a:b]) for a, b in r], shapes)

    axis = 1 if scheme is Scheme.COLUMN_SHARD else 0
    if ranges is None:
        per_matrix = [even_ranges(m.shape[axis], p) for m in mats]
        ranges = [[per_matrix[i][w] for i in range(len(mats))] for w in range(p)]
    if len(ranges) != p:
        raise PartitionError(f"ranges given for {len(ranges)} workers, group has {p}")
    shards = []
    for w in range(p):
        local = []
        for i, m in enumerate(mats):
            a, b = ranges[w][i]
            local.append(np.ascontiguousarray(m[:, a:b] if axis == 1 else m[a:b, :]))
        shards.append(local)
    spec = ShardSpec(scheme, tuple(tuple(tuple(rg) for rg in ranges[w]) for w in range(p)))
    return ShardedMatrix(spec, shards, shapes)
