"""Both kernel backends against each other and against plain numpy."""

import os

import numpy as np
import pytest

from lowrank_tp._backend import BACKEND, available_backends

from oracles import rope_rows, singular_values

BACKENDS = available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def k(request):
    return BACKENDS[request.param]


def test_compiled_backend_is_active_when_built():
    if os.environ.get("LOWRANK_TP_PURE", "") not in ("", "0"):
        assert BACKEND == "python"
    elif "cython" in BACKENDS:
        assert BACKEND == "cython"


def test_jacobi(k):
    r = np.random.default_rng(0)
    a = r.standard_normal((6, 9))
    g, v = a.copy(), np.eye(6)
    sweeps, ok = k.jacobi_sweeps(g, v, 1e-15, 60)
    assert ok and sweeps >= 1
    gram = g @ g.T
    assert np.abs(gram - np.diag(np.diag(gram))).max() < 1e-12
    assert np.allclose(np.sort(np.sqrt(np.diag(gram)))[::-1], singular_values(a), rtol=1e-12)
    assert np.allclose(v @ a, g, atol=1e-12)


def test_scan_runs(k):
    assert k.scan_runs(np.array([5, 6, 7, 2, 3, 9], dtype=np.int64)).tolist() == [[5, 3], [2, 2], [9, 1]]
    assert k.scan_runs(np.array([], dtype=np.int64)).shape == (0, 2)


def test_squeeze_copy(k):
    r = np.random.default_rng(1)
    sk, sv = r.standard_normal((12, 3)), r.standard_normal((12, 2))
    sp = np.arange(12, dtype=np.int64) * 10
    runs = np.array([[8, 0, 3], [0, 4, 2], [0, 0, 0]], dtype=np.int64)
    dk, dv, dp = np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8, dtype=np.int64)
    assert k.squeeze_copy(sk, sv, sp, runs, 2, dk, dv, dp) == 5
    assert np.array_equal(dk[:3], sk[8:11]) and np.array_equal(dv[4:6], sv[0:2])
    assert dp[:3].tolist() == [80, 90, 100] and not dk[3].any()


def test_rope(k):
    r = np.random.default_rng(2)
    x = r.standard_normal((5, 16))
    pos = np.array([0, 1, 7, 100, 3], dtype=np.int64)
    y = x.copy()
    k.rope_inplace(y, pos, 4, 8, 10000.0)
    assert np.allclose(y[:4], rope_rows(x[:4], pos[:4], 8), atol=1e-13)
    assert np.array_equal(y[4], x[4])


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    r = np.random.default_rng(3)
    a = r.standard_normal((7, 7))
    outs = []
    for mod in BACKENDS.values():
        g, v = a.copy(), np.eye(7)
        mod.jacobi_sweeps(g, v, 1e-15, 60)
        outs.append(np.sort(np.linalg.norm(g, axis=1)))
    assert np.allclose(outs[0], outs[1], rtol=1e-13)
