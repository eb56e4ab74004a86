"""Tensor-parallel forward passes for attention and MLP blocks.

Three execution modes are provided for each block:

``dense``
    Megatron-style TP on the original weights: Q/K/V (or up/gate) column
    sharded by heads, O (or down) row sharded, one reduce-sum.
``base``
    Naive decomposed TP: every factor pair is split over its rank, so each
    pair ends in a reduce-sum of the full-width output and every worker then
    repeats the whole attention computation.
``deinfer``
    Communication moved into the low-rank space: the first sub-layer's down
    factors are concatenated and split, one all-gather of the low-rank
    activations follows, up factors are column sharded and applied as one
    batched multiply; the second sub-layer reduces in low-rank space right
    after its row-parallel down factor and applies a replicated up factor.

Hidden states are ``(tokens, hidden_dim)`` arrays. Every forward returns the
output (identical on all workers) and a :class:`ForwardTrace`.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import PartitionError, PlanError
from ..linalg import batched_matmul
from ..parallel import Scheme, all_gather, even_ranges, partition, reduce_sum
from .attention import apply_rope, attention_flops, self_attention_reference


@dataclass
class ForwardTrace:
    attention_flops: list
    matmul_flops: list
    ledger: object = None
    tags: list = field(default_factory=list)

    @classmethod
    def empty(cls, p):
        return cls([0] * p, [0] * p)

    def merge(self, other):
        for w in range(len(self.attention_flops)):
            self.attention_flops[w] += other.attention_flops[w]
            self.matmul_flops[w] += other.matmul_flops[w]
        self.tags.extend(other.tags)
        if self.ledger is None:
            self.ledger = other.ledger
        elif other.ledger is not None:
            self.ledger.entries.extend(other.ledger.entries)
        return self


class _Tracer:
    def __init__(self, group, prefix):
        self.group = group
        self.prefix = prefix
        self.mark = group.ledger.mark()
        self.trace = ForwardTrace.empty(group.world_size)

    def tag(self, name):
        full = f"{self.prefix}{name}"
        self.trace.tags.append(full)
        return full

    def mm(self, worker, a, b):
        self.trace.matmul_flops[worker] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
        return a @ b

    def finish(self):
        self.trace.ledger = self.group.ledger.since(self.mark)
        return self.trace


def _positions(x, positions):
    return np.arange(x.shape[0]) if positions is None else np.asarray(positions, dtype=np.int64)


def head_ranges(config, p):
    """Column range of the query heads (and attention output) owned by each worker."""
    if config.num_heads % p:
        raise PartitionError(f"{config.num_heads} heads cannot be split over {p} workers")
    return even_ranges(config.hidden_dim, p, "hidden dimension")


def kv_head_ranges(config, p):
    """Column range of the kv heads each worker needs.

    With at least as many kv heads as workers they are split evenly; with
    fewer, each kv head is replicated on the workers whose query heads use it.
    """
    nkv, d = config.num_kv_heads, config.head_dim
    if nkv >= p:
        if nkv % p:
            raise PartitionError(f"{nkv} kv heads cannot be split over {p} workers")
        return even_ranges(config.kv_dim, p, "kv dimension")
    if p % nkv:
        raise PartitionError(f"{p} workers cannot share {nkv} kv heads evenly")
    return [((w * nkv // p) * d, (w * nkv // p + 1) * d) for w in range(p)]


def _local_heads(config, p):
    return config.num_heads // p, max(config.num_kv_heads // p, 1)


def _local_attention(config, tracer, worker, q, k, v, positions):
    hl, hkvl = _local_heads(config, tracer.group.world_size)
    tracer.trace.attention_flops[worker] += attention_flops(hl, config.head_dim, positions, positions)
    return self_attention_reference(q, k, v, hl, hkvl, config.head_dim, positions, positions)


def _rope(config, x, positions):
    return apply_rope(x, positions, config.head_dim, config.rope_base) if config.use_rope else x


def _activation(config, up, gate=None):
    if config.glu:
        return gate / (1.0 + np.exp(-gate)) * up
    return np.maximum(up, 0.0)


# ---------------------------------------------------------------- sharding


@dataclass
class DenseAttentionShards:
    qkv: object
    o: object


@dataclass
class BaseShards:
    downs: dict
    ups: dict


@dataclass
class DeinferAttentionShards:
    qkv_down: object
    qkv_up: object
    o_down: object
    o_up: object
    ranks: tuple


@dataclass
class DenseMLPShards:
    first: object
    down: object


@dataclass
class DeinferMLPShards:
    first_down: object
    first_up: object
    down_down: object
    down_up: object
    ranks: tuple


def shard_dense_attention(config, weights, group):
    p = group.world_size
    hr, kr = head_ranges(config, p), kv_head_ranges(config, p)
    qkv = partition([weights["q"], weights["k"], weights["v"]], Scheme.COLUMN_SHARD, group,
                    ranges=[[hr[w], kr[w], kr[w]] for w in range(p)])
    o = partition([weights["o"]], Scheme.ROW_PARALLEL, group, ranges=[[hr[w]] for w in range(p)])
    return DenseAttentionShards(qkv, o)


def shard_dense_mlp(config, weights, group):
    names = ["up", "gate"] if config.glu else ["up"]
    first = partition([weights[n] for n in names], Scheme.COLUMN_SHARD, group)
    down = partition([weights["down"]], Scheme.ROW_PARALLEL, group)
    return DenseMLPShards(first, down)


def shard_base(pairs, names, group):
    """Naive decomposed TP: each down factor column split and each up factor row split over its rank."""
    downs, ups = {}, {}
    for n in names:
        pair = pairs[n]
        if pair.rank % group.world_size:
            raise PartitionError(f"rank {pair.rank} of {n!r} is not divisible by {group.world_size} workers")
        downs[n] = partition([pair.down], Scheme.COLUMN_SHARD, group)
        ups[n] = partition([pair.up], Scheme.ROW_PARALLEL, group)
    return BaseShards(downs, ups)


def shard_base_attention(config, pairs, group):
    return shard_base(pairs, ("q", "k", "v", "o"), group)


def shard_base_mlp(config, pairs, group):
    return shard_base(pairs, ("up", "gate", "down") if config.glu else ("up", "down"), group)


def _check_pair_dims(config, pairs, names):
    shapes = config.matrix_shapes()
    for n in names:
        if n not in pairs:
            raise PlanError(f"missing factor pair {n!r}")
        if (pairs[n].d_in, pairs[n].d_out) != shapes[n]:
            raise PlanError(f"factor pair {n!r} maps {pairs[n].d_in}->{pairs[n].d_out}, expected {shapes[n]}")


def shard_deinfer_attention(config, pairs, group, ranks=None):
    """Partition factor pairs for the low-rank-communication attention block.

    ``ranks`` (``{"q": .., "k": .., "v": .., "o": ..}``) is checked against
    the pairs when given.
    """
    _check_pair_dims(config, pairs, ("q", "k", "v", "o"))
    if ranks is not None:
        for n in ("q", "k", "v", "o"):
            if pairs[n].rank != ranks[n]:
                raise PlanError(f"factor pair {n!r} has rank {pairs[n].rank}, plan says {ranks[n]}")
    p = group.world_size
    hr, kr = head_ranges(config, p), kv_head_ranges(config, p)
    qkv_down = partition([pairs["q"].down, pairs["k"].down, pairs["v"].down], Scheme.CONCAT_SPLIT, group)
    qkv_up = partition([pairs["q"].up, pairs["k"].up, pairs["v"].up], Scheme.COLUMN_SHARD, group,
                       ranges=[[hr[w], kr[w], kr[w]] for w in range(p)])
    o_down = partition([pairs["o"].down], Scheme.ROW_PARALLEL, group, ranges=[[hr[w]] for w in range(p)])
    o_up = partition([pairs["o"].up], Scheme.REPLICATED, group)
    return DeinferAttentionShards(qkv_down, qkv_up, o_down, o_up,
                                  tuple(pairs[n].rank for n in ("q", "k", "v", "o")))


def shard_deinfer_mlp(config, pairs, group):
    names = ["up", "gate"] if config.glu else ["up"]
    _check_pair_dims(config, pairs, names + ["down"])
    first_down = partition([pairs[n].down for n in names], Scheme.CONCAT_SPLIT, group)
    first_up = partition([pairs[n].up for n in names], Scheme.COLUMN_SHARD, group)
    down_down = partition([pairs["down"].down], Scheme.ROW_PARALLEL, group)
    down_up = partition([pairs["down"].up], Scheme.REPLICATED, group)
    return DeinferMLPShards(first_down, first_up, down_down, down_up,
                            tuple(pairs[n].rank for n in names + ["down"]))


# ---------------------------------------------------------------- attention


def forward_dense_tp_attention(config, shards, x, group, positions=None, tag_prefix=""):
    t = _Tracer(group, tag_prefix)
    pos = _positions(x, positions)
    partials = []
    for w in group.ranks:
        wq, wk, wv = shards.qkv.local(w)
        q = _rope(config, t.mm(w, x, wq), pos)
        k = _rope(config, t.mm(w, x, wk), pos)
        v = t.mm(w, x, wv)
        attn = _local_attention(config, t, w, q, k, v, pos)
        partials.append(t.mm(w, attn, shards.o.local(w)[0]))
    out = reduce_sum(group, partials, t.tag("attn.o_reduce"))
    return out[0], t.finish()


def _base_pair(t, group, shards, name, inputs, tag):
    partials = [t.mm(w, t.mm(w, inputs[w], shards.downs[name].local(w)[0]), shards.ups[name].local(w)[0])
                for w in group.ranks]
    return reduce_sum(group, partials, t.tag(tag))


def forward_base_attention(config, shards, x, group, positions=None, tag_prefix=""):
    t = _Tracer(group, tag_prefix)
    pos = _positions(x, positions)
    xs = [x] * group.world_size
    q = _base_pair(t, group, shards, "q", xs, "attn.q_reduce")
    k = _base_pair(t, group, shards, "k", xs, "attn.k_reduce")
    v = _base_pair(t, group, shards, "v", xs, "attn.v_reduce")
    attn = []
    for w in group.ranks:
        qw, kw = _rope(config, q[w], pos), _rope(config, k[w], pos)
        # every worker holds the full Q/K/V and repeats the whole attention
        t.trace.attention_flops[w] += attention_flops(config.num_heads, config.head_dim, pos, pos)
        attn.append(self_attention_reference(qw, kw, v[w], config.num_heads, config.num_kv_heads,
                                             config.head_dim, pos, pos))
    out = _base_pair(t, group, shards, "o", attn, "attn.o_reduce")
    return out[0], t.finish()


def forward_deinfer_attention(config, shards, x, group, positions=None, cache=None, tag_prefix=""):
    """Low-rank-communication attention.

    With ``cache`` given, the gathered low-rank K/V rows are handed to
    ``cache.store`` and attention for worker ``w`` is delegated to
    ``cache.attend(w, q_local, k_up_local, v_up_local, tracer)``, which reads
    the whole cached history.
    """
    t = _Tracer(group, tag_prefix)
    pos = _positions(x, positions)
    lq, lk, lv, _ = shards.ranks
    lowrank = all_gather(group, [t.mm(w, x, shards.qkv_down.local(w)) for w in group.ranks],
                         t.tag("attn.qkv_gather"))
    if cache is not None:
        first = lowrank[0]
        cache.store(first[:, lq:lq + lk], first[:, lq + lk:])
    partials = []
    for w in group.ranks:
        q_lr, k_lr, v_lr = lowrank[w][:, :lq], lowrank[w][:, lq:lq + lk], lowrank[w][:, lq + lk:]
        q_up, k_up, v_up = shards.qkv_up.local(w)
        if cache is None:
            q, k, v = batched_matmul([(q_lr, q_up), (k_lr, k_up), (v_lr, v_up)])
            for a, b in ((q_lr, q_up), (k_lr, k_up), (v_lr, v_up)):
                t.trace.matmul_flops[w] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
            attn = _local_attention(config, t, w, _rope(config, q, pos), _rope(config, k, pos), v, pos)
        else:
            q = _rope(config, t.mm(w, q_lr, q_up), pos)
            attn = cache.attend(w, q, k_up, v_up, t)
        partials.append(t.mm(w, attn, shards.o_down.local(w)[0]))
    reduced = reduce_sum(group, partials, t.tag("attn.o_reduce"))
    outs = [t.mm(w, reduced[w], shards.o_up.local(w)[0]) for w in group.ranks]
    return outs[0], t.finish()


# ---------------------------------------------------------------- MLP


def forward_dense_tp_mlp(config, shards, x, group, tag_prefix=""):
    t = _Tracer(group, tag_prefix)
    partials = []
    for w in group.ranks:
        local = shards.first.local(w)
        up = t.mm(w, x, local[0])
        act = _activation(config, up, t.mm(w, x, local[1]) if config.glu else None)
        partials.append(t.mm(w, act, shards.down.local(w)[0]))
    out = reduce_sum(group, partials, t.tag("mlp.down_reduce"))
    return out[0], t.finish()


def forward_base_mlp(config, shards, x, group, tag_prefix=""):
    t = _Tracer(group, tag_prefix)
    xs = [x] * group.world_size
    up = _base_pair(t, group, shards, "up", xs, "mlp.up_reduce")
    gate = _base_pair(t, group, shards, "gate", xs, "mlp.gate_reduce") if config.glu else [None] * group.world_size
    act = [_activation(config, up[w], gate[w]) for w in group.ranks]
    out = _base_pair(t, group, shards, "down", act, "mlp.down_reduce")
    return out[0], t.finish()


def forward_deinfer_mlp(config, shards, x, group, tag_prefix=""):
    t = _Tracer(group, tag_prefix)
    l_up = shards.ranks[0]
    lowrank = all_gather(group, [t.mm(w, x, shards.first_down.local(w)) for w in group.ranks],
                         t.tag("mlp.up_gate_gather"))
    partials = []
    for w in group.ranks:
        ups = shards.first_up.local(w)
        if config.glu:
            up, gate = batched_matmul([(lowrank[w][:, :l_up], ups[0]), (lowrank[w][:, l_up:], ups[1])])
            t.trace.matmul_flops[w] += 2 * x.shape[0] * (l_up * ups[0].shape[1] + (lowrank[w].shape[1] - l_up) * ups[1].shape[1])
        else:
            up, gate = t.mm(w, lowrank[w], ups[0]), None
        act = _activation(config, up, gate)
        partials.append(t.mm(w, act, shards.down_down.local(w)[0]))
    reduced = reduce_sum(group, partials, t.tag("mlp.down_reduce"))
    outs = [t.mm(w, reduced[w], shards.down_up.local(w)[0]) for w in group.ranks]
    return outs[0], t.finish()
