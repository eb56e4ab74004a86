import numpy as np
import pytest

from lowrank_tp.errors import CollectiveError, PartitionError
from lowrank_tp.parallel import (
    ALL_GATHER,
    REDUCE_SUM,
    Scheme,
    WorkerGroup,
    all_gather,
    partition,
    reduce_sum,
)


def test_all_gather_p1_identity_no_volume():
    g = WorkerGroup(1)
    x = np.arange(3.0)[None, :]
    (out,) = all_gather(g, [x])
    assert np.array_equal(out, x)
    assert g.ledger.volume() == 0 and g.ledger.count() == 0


def test_all_gather_p2():
    g = WorkerGroup(2)
    outs = all_gather(g, [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])])
    for o in outs:
        assert o.tolist() == [[1, 2, 3, 4]]
    assert g.ledger.count(ALL_GATHER) == 1
    assert g.ledger.volume_per_token(ALL_GATHER) == 4


def test_all_gather_p4_order():
    g = WorkerGroup(4)
    r = np.random.default_rng(0)
    locs = [r.standard_normal((3, 2)) for _ in range(4)]
    want = locs[0]
    for x in locs[1:]:
        want = np.hstack([want, x])
    for o in all_gather(g, locs):
        assert np.array_equal(o, want)


def test_all_gather_mismatch():
    with pytest.raises(CollectiveError):
        all_gather(WorkerGroup(2), [np.ones((1, 2)), np.ones((1, 3))])


def test_reduce_sum_cases():
    g1 = WorkerGroup(1)
    x = np.ones((1, 3))
    assert np.array_equal(reduce_sum(g1, [x])[0], x)
    assert g1.ledger.volume() == 0
    g3 = WorkerGroup(3)
    for o in reduce_sum(g3, [np.zeros((2, 2))] * 3):
        assert not o.any()
    g2 = WorkerGroup(2)
    r = np.random.default_rng(1)
    a, b = r.standard_normal((1, 5)), r.standard_normal((1, 5))
    for o in reduce_sum(g2, [a, b]):
        assert np.array_equal(o, a + b)
    assert g2.ledger.volume_per_token(REDUCE_SUM) == 10


def test_reduce_sum_mismatch():
    with pytest.raises(CollectiveError):
        reduce_sum(WorkerGroup(2), [np.ones((1, 2)), np.ones((2, 2))])


def test_ledger_completeness_and_determinism():
    def run():
        g = WorkerGroup(2)
        r = np.random.default_rng(7)
        all_gather(g, [r.standard_normal((2, 3)) for _ in range(2)], "a")
        reduce_sum(g, [r.standard_normal((2, 4)) for _ in range(2)], "b")
        return g.ledger
    l1, l2 = run(), run()
    assert l1.count() == 2
    assert l1.summary() == l2.summary() == {
        "all_gather_calls": 1, "reduce_sum_calls": 1,
        "all_gather_volume": 12, "reduce_sum_volume": 16, "total_volume": 28,
    }


def test_concat_split_ranges():
    g = WorkerGroup(2)
    mats = [np.ones((3, 4)), np.ones((3, 2)), np.ones((3, 2))]
    sm = partition(mats, Scheme.CONCAT_SPLIT, g)
    assert [r[0] for r in sm.spec.ranges] == [(0, 4), (4, 8)]
    assert sm.local(0).shape == (3, 4)


def test_column_shard():
    sm = partition([np.arange(16.0).reshape(2, 8)], Scheme.COLUMN_SHARD, WorkerGroup(4))
    assert [s[0].shape for s in sm.shards] == [(2, 2)] * 4


@pytest.mark.parametrize("scheme", list(Scheme))
def test_reassembly_round_trip(scheme):
    r = np.random.default_rng(2)
    mats = [r.standard_normal((4, 4)), r.standard_normal((4, 8))]
    sm = partition(mats, scheme, WorkerGroup(2))
    for got, want in zip(sm.reassemble(), mats):
        assert np.array_equal(got, want)


def test_row_parallel_matmul_reduce():
    r = np.random.default_rng(3)
    w, x = r.standard_normal((8, 5)), r.standard_normal((3, 8))
    g = WorkerGroup(4)
    sm = partition([w], Scheme.ROW_PARALLEL, g)
    partial = [x[:, a:b] @ sm.local(i)[0] for i, ((a, b),) in enumerate(sm.spec.ranges)]
    out = reduce_sum(g, partial)[0]
    assert np.allclose(out, x @ w, rtol=0, atol=1e-12)


def test_non_divisible_rejected():
    with pytest.raises(PartitionError):
        partition([np.ones((3, 5))], Scheme.COLUMN_SHARD, WorkerGroup(2))
    with pytest.raises(PartitionError):
        partition([np.ones((3, 5))], Scheme.CONCAT_SPLIT, WorkerGroup(2))
