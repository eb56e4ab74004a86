import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank_tp.decomposition import DecompositionPlan
from lowrank_tp.errors import CapacityError, ConfigError, PayloadError, ReplayError, SequenceLookupError
from lowrank_tp.kvcache import (
    BlockTable,
    BufferArena,
    FixedBuffers,
    PagedCachePool,
    PagedDecodeSession,
    ReplayGuard,
    RopeSpec,
    allocate_blocks,
    append_kv,
    build_remapping_index,
    gather_sequence,
    paged_attention_reference,
    prepare_replay,
    replay_reconstruct,
    scan_contiguous_runs,
)
from lowrank_tp.pipelines import ModelConfig, TPModel, random_weights, self_attention_reference

from oracles import free_list_simulation, min_order_preserving_partition, rope_rows

# ------------------------------------------------------------------ block table


def test_fresh_allocation_contiguous():
    t = BlockTable(8, 4)
    assert allocate_blocks(t, "a", 3) == [0, 1, 2]


def test_reuse_after_free():
    t = BlockTable(8, 4)
    for s in "abcd":
        allocate_blocks(t, s, 1)
    t.free_sequence("b")
    allocate_blocks(t, "e", 2)
    ops = [("alloc", s, 1) for s in "abcd"] + [("free", "b"), ("alloc", "e", 2)]
    assert t.physical("e") == [1, 4] == free_list_simulation(8, ops)["e"]


def test_capacity_error():
    t = BlockTable(2, 4)
    with pytest.raises(CapacityError):
        allocate_blocks(t, "a", 3)


def test_unknown_sequence():
    with pytest.raises(SequenceLookupError):
        BlockTable(2, 2).physical("nope")


def test_append_kv_blocks_and_payload():
    pool = PagedCachePool(8, 2, 3, 2)
    t = BlockTable(8, 2)
    for i in range(3):
        append_kv(pool, t, "s", np.ones(3) * i, np.ones(2) * i, i)
    assert len(t.physical("s")) == 2 and t.num_tokens("s") == 3
    with pytest.raises(PayloadError):
        append_kv(pool, t, "s", np.ones(4), np.ones(2), 3)


def test_append_kv_interleaved_readback():
    pool = PagedCachePool(64, 4, 2, 2)
    t = BlockTable(64, 4)
    r = np.random.default_rng(0)
    shadow = {s: [] for s in "xyz"}
    for i in range(100):
        s = "xyz"[int(r.integers(3))]
        k, v = r.standard_normal(2), r.standard_normal(2)
        append_kv(pool, t, s, k, v, len(shadow[s]))
        shadow[s].append((k, v))
    for s, items in shadow.items():
        k, v, pos = pool.read_sequence(t, s)
        assert np.array_equal(k, [a for a, _ in items]) and np.array_equal(v, [b for _, b in items])
        assert pos.tolist() == list(range(len(items)))


# ------------------------------------------------------------------ scan / remap

def _table_with(physical, block_size=1):
    t = BlockTable(max(physical) + 1, block_size,
                   free_order=list(physical) + [b for b in range(max(physical) + 1) if b not in physical])
    t.allocate_blocks("s", len(physical))
    return t


def test_scan_examples():
    assert scan_contiguous_runs(_table_with([5, 6, 7]), "s") == [(5, 3)]
    assert scan_contiguous_runs(_table_with([5, 7, 6]), "s") == [(5, 1), (7, 1), (6, 1)]


def test_scan_unknown():
    with pytest.raises(SequenceLookupError):
        scan_contiguous_runs(BlockTable(4, 1), "s")


@settings(max_examples=60, deadline=None)
@given(st.permutations(list(range(8))), st.integers(1, 8))
def test_scan_minimal_property(perm, n):
    phys = perm[:n]
    runs = scan_contiguous_runs(_table_with(phys), "s")
    assert len(runs) == min_order_preserving_partition(phys)
    assert [s + i for s, length in runs for i in range(length)] == phys
    assert len(runs) == 1 + sum(phys[i + 1] != phys[i] + 1 for i in range(n - 1))


def test_remapping_examples():
    assert build_remapping_index({"a": 3}, 8) == {"a": [0, 1, 2]}
    assert build_remapping_index({"a": 2, "b": 3}, 8) == {"a": [0, 1], "b": [2, 3, 4]}
    with pytest.raises(CapacityError):
        build_remapping_index({"a": 5, "b": 5}, 8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=6))
def test_remapping_bijection(counts):
    remap = build_remapping_index({i: c for i, c in enumerate(counts)}, 64)
    flat = [b for i in range(len(counts)) for b in remap[i]]
    assert flat == list(range(sum(counts)))


# ------------------------------------------------------------------ replay stage

def make_stage(lk=3, lv=2, kv_width=4, bs=2, num_blocks=16, max_tokens=16, free_order=None, q_width=4):
    arena = BufferArena()
    pool = PagedCachePool(num_blocks, bs, lk, lv, arena)
    table = BlockTable(num_blocks, bs, free_order)
    bufs = FixedBuffers(arena, max_tokens, bs, lk, lv, kv_width, max_seqs=2, q_width=q_width)
    return arena, pool, table, bufs, ReplayGuard(arena)


def fill(pool, table, seq, n, rng):
    for i in range(n):
        append_kv(pool, table, seq, rng.standard_normal(pool.l_k), rng.standard_normal(pool.l_v), i)


def test_empty_cache_replay():
    arena, pool, table, bufs, guard = make_stage()
    table.add_sequence("s")
    bufs.load_plan(prepare_replay(table, ["s"], bufs.capacity_blocks, bufs.max_tokens))
    r = np.random.default_rng(0)
    with guard.replay():
        k, v = replay_reconstruct(bufs, guard, pool, r.standard_normal((3, 4)), r.standard_normal((2, 4)), None, table)
    assert k.shape[0] == 0 and v.shape[0] == 0 and guard.allocations_in_replay == 0


def test_contiguous_no_rope_matches_direct():
    arena, pool, table, bufs, guard = make_stage()
    r = np.random.default_rng(1)
    fill(pool, table, "s", 5, r)
    k_up, v_up = r.standard_normal((3, 4)), r.standard_normal((2, 4))
    bufs.load_plan(prepare_replay(table, ["s"], bufs.capacity_blocks, bufs.max_tokens))
    with guard.replay():
        replay_reconstruct(bufs, guard, pool, k_up, v_up, None, table)
    rows = gather_sequence(bufs, 0)
    k, v, _ = pool.read_sequence(table, "s")
    assert np.abs(bufs.recon_k[rows] - k @ k_up).max() <= 1e-10
    assert np.abs(bufs.recon_v[rows] - v @ v_up).max() <= 1e-10
    assert bufs.copied_rows == 5


def test_scrambled_with_rope_and_copy_volume():
    r = np.random.default_rng(2)
    arena, pool, table, bufs, guard = make_stage(kv_width=8, free_order=r.permutation(16))
    fill(pool, table, "a", 5, r)
    fill(pool, table, "b", 3, r)
    k_up, v_up = r.standard_normal((3, 8)), r.standard_normal((2, 8))
    plan = prepare_replay(table, ["a", "b"], bufs.capacity_blocks, bufs.max_tokens)
    bufs.load_plan(plan)
    with guard.replay():
        replay_reconstruct(bufs, guard, pool, k_up, v_up, RopeSpec(4), table)
    assert bufs.copied_rows == plan.active_tokens == 8
    for i, s in enumerate(["a", "b"]):
        rows = gather_sequence(bufs, i)
        k, v, pos = pool.read_sequence(table, s)
        assert np.abs(bufs.recon_k[rows] - rope_rows(k @ k_up, pos, 4)).max() <= 1e-10
        assert np.abs(bufs.recon_v[rows] - v @ v_up).max() <= 1e-10


def test_stale_table_and_plan():
    arena, pool, table, bufs, guard = make_stage()
    r = np.random.default_rng(3)
    fill(pool, table, "s", 2, r)
    plan = prepare_replay(table, ["s"], bufs.capacity_blocks)
    bufs.load_plan(plan, ["s"], [1], [])
    fill(pool, table, "s", 1, r)
    with pytest.raises(ReplayError):
        with guard.replay():
            replay_reconstruct(bufs, guard, pool, np.ones((3, 4)), np.ones((2, 4)), None, table)
    with pytest.raises(ReplayError):
        paged_attention_reference(np.ones((1, 4)), bufs, 1, 1, 4)


def test_capacity_overflow():
    arena, pool, table, bufs, guard = make_stage(max_tokens=4)
    fill(pool, table, "s", 6, np.random.default_rng(4))
    with pytest.raises(CapacityError):
        prepare_replay(table, ["s"], bufs.capacity_blocks, bufs.max_tokens)


def test_guard_allocation_and_signature_drift():
    arena = BufferArena()
    guard = ReplayGuard(arena)
    a = arena.empty("a", (4,))
    with guard.replay():
        guard.record("op", a)
    with pytest.raises(ReplayError):
        with guard.replay():
            arena.empty("b", (4,))
            guard.record("op", a)
    assert guard.allocations_in_replay == 1
    b = np.zeros(8)
    with pytest.raises(ReplayError):
        with guard.replay():
            guard.record("op", b)
    with pytest.raises(ReplayError):
        guard.record("op", a)


def test_paged_attention_single_token_and_layout():
    r = np.random.default_rng(5)
    outs = []
    for bs in (1, 4):
        arena, pool, table, bufs, guard = make_stage(lk=4, lv=4, kv_width=4, bs=bs, free_order=None)
        r2 = np.random.default_rng(6)
        fill(pool, table, "s", 3, r2)
        plan = prepare_replay(table, ["s"], bufs.capacity_blocks)
        bufs.load_plan(plan, ["s"], [2], [])
        up = np.eye(4)
        with guard.replay():
            replay_reconstruct(bufs, guard, pool, up, up, None, table)
            q = r2.standard_normal((1, 4))
            out, _ = paged_attention_reference(q, bufs, 1, 1, 4, guard)
        k, v, _ = pool.read_sequence(table, "s")
        assert np.allclose(out, self_attention_reference(q, k, v, 1, 1, 4, [2], [0, 1, 2]), atol=1e-10)
        outs.append(out.copy())
    assert np.allclose(outs[0], outs[1], atol=1e-14)

    arena, pool, table, bufs, guard = make_stage(lk=4, lv=4, kv_width=4)
    fill(pool, table, "s", 1, r)
    bufs.load_plan(prepare_replay(table, ["s"], bufs.capacity_blocks), ["s"], [0], [])
    with guard.replay():
        replay_reconstruct(bufs, guard, pool, np.eye(4), np.eye(4), None, table)
        out, _ = paged_attention_reference(r.standard_normal((1, 4)), bufs, 1, 1, 4, guard)
    assert np.allclose(out, pool.v[table.rows("s")], atol=1e-15)


# ------------------------------------------------------------------ decode session

CFG = ModelConfig(num_heads=4, num_kv_heads=2, head_dim=8, intermediate_dim=64, num_layers=2)
RANKS = {"q": 16, "k": 8, "v": 8, "o": 16, "up": 16, "gate": 16, "down": 16}


def session(p, cfg=CFG, seed=0, ranks=RANKS, **kw):
    w = random_weights(cfg, seed=seed)
    model = TPModel.build(cfg, w, "deinfer", p, DecompositionPlan.uniform(ranks, cfg.num_layers))
    order = np.random.default_rng(seed).permutation(64)
    return model, PagedDecodeSession(model, block_size=4, num_blocks=64, max_tokens=128, max_seqs=2,
                                     free_order=order, **kw)


@pytest.mark.parametrize("p", [1, 2, 4])
def test_decode_matches_recompute(p):
    model, sess = session(p)
    out, _, _ = sess.prefill({"a": [1, 2, 3, 4, 5], "b": [6, 7, 8]})
    ids = sess.buffer_identities()
    for _ in range(6):
        out, _, _ = sess.decode({s: int(np.argmax(v[-1])) for s, v in out.items()})
        for s, rows in out.items():
            ref, _ = model.forward(sess.history[s])
            assert np.abs(ref[-1] - rows[-1]).max() <= 1e-8
        assert sess.reconstruction_error() <= 1e-10
    assert sess.buffer_identities() == ids
    assert all(w.guard.allocations_in_replay == 0 for w in sess.workers)
    assert all(step == sess.signature_log[0] for step in sess.signature_log)


def test_gqa_worker_shards_concatenate():
    outs = {}
    for p in (1, 2):
        model, sess = session(p, seed=3)
        out, _, _ = sess.prefill({"a": [3, 1, 4, 1]})
        out, _, _ = sess.decode({"a": 5})
        outs[p] = out["a"]
    assert np.allclose(outs[1], outs[2], atol=1e-10)


def test_mqa_replicated_kv_heads():
    cfg = ModelConfig(num_heads=4, num_kv_heads=1, head_dim=8, intermediate_dim=32, use_rope=True)
    ranks = {"q": 8, "k": 4, "v": 4, "o": 8, "up": 8, "gate": 8, "down": 8}
    model, sess = session(4, cfg, seed=1, ranks=ranks)
    out, _, _ = sess.prefill({"a": [1, 2, 3]})
    for _ in range(3):
        out, _, _ = sess.decode({"a": int(np.argmax(out["a"][-1]))})
    ref, _ = model.forward(sess.history["a"])
    assert np.abs(ref[-1] - out["a"][-1]).max() <= 1e-8


def test_free_and_reuse_across_sessions():
    model, sess = session(2)
    out, _, _ = sess.prefill({"a": [1, 2, 3, 4, 5], "b": [6, 7]})
    sess.decode({"a": 1, "b": 2})
    sess.free("a")
    out, _, _ = sess.prefill({"c": [9, 8, 7, 6, 5, 4]})
    out, _, _ = sess.decode({"b": 3, "c": 2})
    for s in ("b", "c"):
        ref, _ = model.forward(sess.history[s])
        assert np.abs(ref[-1] - out[s][-1]).max() <= 1e-8


def test_session_requires_deinfer():
    w = random_weights(CFG)
    model = TPModel.build(CFG, w, "base", 2, DecompositionPlan.uniform(RANKS, 2))
    with pytest.raises(ConfigError):
        PagedDecodeSession(model)
