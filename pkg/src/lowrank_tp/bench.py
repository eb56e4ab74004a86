"""Pipeline and kernel benchmarks.

``bench_pipeline`` serves a batch of prompts through prefill and a number of
decode steps. The deinfer pipeline decodes against the paged low-rank cache;
dense and base have no cache and recompute the full history every step.
"""

import time
import timeit

import numpy as np

from ._backend import available_backends
from .kvcache import PagedDecodeSession
from .parallel import WorkerGroup
from .pipelines.model import TPModel, random_weights
from .decomposition import decompose_model


def _model(rc, mode, p):
    weights = random_weights(rc.model, rc.vocab_size, rc.seed)
    layers = weights.layers if mode == "dense" else decompose_model(weights.layers, rc.plan()).factors
    return TPModel(rc.model, weights, layers, mode, WorkerGroup(p))


def _step_record(kind, seconds, tokens, trace):
    return {
        "kind": kind,
        "seconds": seconds,
        "tokens": tokens,
        "ledger": trace.ledger.summary(),
        "attention_flops": list(trace.attention_flops),
        "matmul_flops": list(trace.matmul_flops),
    }


def bench_pipeline(rc, mode, p, batch=2, prefill=8, decode=8, use_cache=True):
    """Time prefill plus ``decode`` greedy steps; returns a JSON-ready dict."""
    model = _model(rc, mode, p)
    rng = np.random.Generator(np.random.PCG64(rc.seed))
    prompts = {f"s{i}": [int(t) for t in rng.integers(0, rc.vocab_size, prefill)] for i in range(batch)}
    steps = []
    cached = use_cache and mode == "deinfer"
    if cached:
        cs = rc.cache
        need = batch * (prefill + decode)
        sess = PagedDecodeSession(model, cs.block_size, max(cs.num_blocks, -(-need // cs.block_size) + batch),
                                  max(cs.max_tokens, need), max_seqs=batch)
        t0 = time.perf_counter()
        out, trace, _ = sess.prefill(prompts)
        steps.append(_step_record("prefill", time.perf_counter() - t0, batch * prefill, trace))
        for _ in range(decode):
            nxt = {s: int(np.argmax(v[-1])) for s, v in out.items()}
            t0 = time.perf_counter()
            out, trace, _ = sess.decode(nxt)
            steps.append(_step_record("decode", time.perf_counter() - t0, batch, trace))
    else:
        history = {s: list(t) for s, t in prompts.items()}
        for i in range(decode + 1):
            t0 = time.perf_counter()
            merged = None
            nxt = {}
            for s, toks in history.items():
                logits, trace = model.forward(toks)
                nxt[s] = int(np.argmax(logits[-1]))
                merged = trace if merged is None else merged.merge(trace)
            kind = "prefill" if i == 0 else "decode"
            steps.append(_step_record(kind, time.perf_counter() - t0,
                                      batch * (prefill if i == 0 else 1), merged))
            if i < decode:
                for s, tok in nxt.items():
                    history[s].append(tok)
    decode_steps = [s for s in steps if s["kind"] == "decode"]
    return {
        "mode": mode,
        "tp": p,
        "batch": batch,
        "prefill": prefill,
        "decode": decode,
        "kv_cache": cached,
        "steps": steps,
        "decode_tokens_per_second": (sum(s["tokens"] for s in decode_steps)
                                     / max(sum(s["seconds"] for s in decode_steps), 1e-12)) if decode_steps else None,
    }


def _kernel_cases(size, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal((size, size))
    perm = rng.permutation(4 * size).astype(np.int64)
    rows = 16 * size
    src_k = rng.standard_normal((rows, 16))
    src_v = rng.standard_normal((rows, 16))
    src_pos = np.arange(rows, dtype=np.int64)
    runs = np.array([[i * 16, i * 16, 16] for i in range(size)], dtype=np.int64)
    rope_x = rng.standard_normal((rows, 64))
    rope_pos = np.arange(rows, dtype=np.int64)

    def jacobi(k):
        g = a.copy()
        v = np.eye(size)
        return lambda: k.jacobi_sweeps(g.copy(), v.copy(), 1e-15, 60)

    def scan(k):
        return lambda: k.scan_runs(perm)

    def squeeze(k):
        dk, dv, dp = np.empty_like(src_k), np.empty_like(src_v), np.empty_like(src_pos)
        return lambda: k.squeeze_copy(src_k, src_v, src_pos, runs, len(runs), dk, dv, dp)

    def rope(k):
        x = rope_x.copy()
        return lambda: k.rope_inplace(x, rope_pos, rows, 8, 10000.0)

    return {"jacobi_sweeps": jacobi, "scan_runs": scan, "squeeze_copy": squeeze, "rope_inplace": rope}


def bench_kernels(size=32, repeat=5, number=3, seed=0):
    """Best-of-``repeat`` seconds per call for each kernel on every available backend."""
    backends = available_backends()
    results = {}
    for kname, make in _kernel_cases(size, seed).items():
        row = {}
        for bname, mod in sorted(backends.items()):
            fn = make(mod)
            row[bname] = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        results[kname] = row
    return {"size": size, "backends": sorted(backends), "kernels": results}
