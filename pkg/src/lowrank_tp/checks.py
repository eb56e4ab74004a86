"""Property suites behind ``lowrank-tp check``.

Each suite returns a list of :class:`Property` results; nothing raises on a
failed property, so one report can carry every outcome.
"""

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from . import costmodel
from .errors import ConfigError, LowRankTPError
from .kvcache import PagedDecodeSession, scan_contiguous_runs
from .kvcache.pool import BlockTable
from .linalg import relative_error
from .parallel import ALL_GATHER, REDUCE_SUM, WorkerGroup
from .pipelines import blocks
from .pipelines.model import TPModel, lossless_plan, random_weights, reference_forward
from .decomposition import decompose_model

SUITES = ("equivalence", "census", "kvcache", "cost")
EQUIV_TOL = 1e-8
RECON_TOL = 1e-10


@dataclass
class Property:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self):
        return asdict(self)


def _tokens(rc, n, salt=0):
    rng = np.random.Generator(np.random.PCG64(rc.seed + 7919 * (salt + 1)))
    return rng.integers(0, rc.vocab_size, size=n)


def _guarded(suite, name, fn):
    try:
        ok, detail = fn()
    except LowRankTPError as exc:
        return Property(suite, name, False, f"{type(exc).__name__}: {exc}")
    return Property(suite, name, bool(ok), detail)


def equivalence_suite(rc, n_tokens=6):
    cfg = rc.model
    weights = random_weights(cfg, rc.vocab_size, rc.seed)
    toks = _tokens(rc, n_tokens)
    props = []
    factors = decompose_model(weights.layers, rc.plan()).factors
    oracle = reference_forward(cfg, weights, factors, toks)
    for p in rc.tp:
        def run(p=p):
            base, _ = TPModel(cfg, weights, factors, "base", WorkerGroup(p)).forward(toks)
            de, _ = TPModel(cfg, weights, factors, "deinfer", WorkerGroup(p)).forward(toks)
            errs = (relative_error(de, base), relative_error(base, oracle), relative_error(de, oracle))
            return max(errs) <= EQUIV_TOL, "deinfer~base %.3e, base~oracle %.3e, deinfer~oracle %.3e" % errs
        props.append(_guarded("equivalence", f"decomposed p={p}", run))

    lossless = decompose_model(weights.layers, lossless_plan(cfg)).factors
    dense_ref = reference_forward(cfg, weights, weights.layers, toks)
    for p in rc.tp:
        def run_lossless(p=p):
            errs = []
            for mode, layers in (("dense", weights.layers), ("base", lossless), ("deinfer", lossless)):
                out, _ = TPModel(cfg, weights, layers, mode, WorkerGroup(p)).forward(toks)
                errs.append(relative_error(out, dense_ref))
            return max(errs) <= EQUIV_TOL, "dense %.3e, base %.3e, deinfer %.3e vs dense oracle" % tuple(errs)
        props.append(_guarded("equivalence", f"lossless p={p}", run_lossless))
    return props


def collective_counts(trace):
    return trace.ledger.count(ALL_GATHER), trace.ledger.count(REDUCE_SUM)


def block_traces(cfg, weights, factors, p, x):
    """Run each attention and MLP block once in every mode; returns ``{(block, mode): trace}``."""
    g = WorkerGroup(p)
    dense, pairs = weights.layers[0], factors[0]
    out = {}
    _, out["attn", "dense"] = blocks.forward_dense_tp_attention(cfg, blocks.shard_dense_attention(cfg, dense, g), x, g)
    _, out["attn", "base"] = blocks.forward_base_attention(cfg, blocks.shard_base_attention(cfg, pairs, g), x, g)
    _, out["attn", "deinfer"] = blocks.forward_deinfer_attention(cfg, blocks.shard_deinfer_attention(cfg, pairs, g), x, g)
    _, out["mlp", "dense"] = blocks.forward_dense_tp_mlp(cfg, blocks.shard_dense_mlp(cfg, dense, g), x, g)
    _, out["mlp", "base"] = blocks.forward_base_mlp(cfg, blocks.shard_base_mlp(cfg, pairs, g), x, g)
    _, out["mlp", "deinfer"] = blocks.forward_deinfer_mlp(cfg, blocks.shard_deinfer_mlp(cfg, pairs, g), x, g)
    return out


def expected_census(cfg):
    """``(all_gather, reduce_sum)`` calls per block and mode for p > 1."""
    return {
        ("attn", "dense"): (0, 1), ("attn", "base"): (0, 4), ("attn", "deinfer"): (1, 1),
        ("mlp", "dense"): (0, 1), ("mlp", "base"): (0, 3 if cfg.glu else 2), ("mlp", "deinfer"): (1, 1),
    }


def census_suite(rc, n_tokens=5):
    cfg = rc.model
    weights = random_weights(cfg, rc.vocab_size, rc.seed)
    factors = decompose_model(weights.layers, rc.plan()).factors
    x = weights.embedding[_tokens(rc, n_tokens)]
    props = []
    want = expected_census(cfg)
    base_flops = {}
    for p in rc.tp:
        def run(p=p):
            traces = block_traces(cfg, weights, factors, p, x)
            base_flops[p] = (traces["attn", "base"].attention_flops, traces["attn", "deinfer"].attention_flops)
            if p == 1:
                got = {k: collective_counts(t) for k, t in traces.items()}
                return all(v == (0, 0) for v in got.values()), "single worker: no collectives"
            got = {k: collective_counts(t) for k, t in traces.items()}
            bad = {f"{b}/{m}": (got[b, m], want[b, m]) for b, m in want if got[b, m] != want[b, m]}
            return not bad, "all counts as expected" if not bad else f"mismatch (got, want): {bad}"
        props.append(_guarded("census", f"collective counts p={p}", run))
    if 1 in base_flops:
        b1, d1 = base_flops[1][0][0], base_flops[1][1][0]
        for p in rc.tp:
            if p == 1 or p not in base_flops:
                continue
            b, d = base_flops[p]
            ok = all(v == b1 for v in b) and all(v * p == d1 for v in d)
            props.append(Property("census", f"attention duplication p={p}", ok,
                                  f"base per-worker {b[0]} vs {b1}; deinfer per-worker {d[0]} vs {d1}/{p}"))
    return props


def scan_oracle(physical):
    """Fewest order-preserving runs of consecutive indices, by trying every cut set."""
    n = len(physical)
    best = n
    for cuts in itertools.product((0, 1), repeat=max(n - 1, 0)):
        ok = all(cut or physical[i + 1] == physical[i] + 1 for i, cut in enumerate(cuts))
        if ok:
            best = min(best, 1 + sum(cuts))
    return best if n else 0


def kvcache_suite(rc, decode_steps=16, prompt_lens=(5, 3), scan_trials=200):
    cfg = rc.model
    cs = rc.cache
    weights = random_weights(cfg, rc.vocab_size, rc.seed)
    factors = decompose_model(weights.layers, rc.plan()).factors
    props = []
    for p in rc.tp:
        def run(p=p):
            model = TPModel(cfg, weights, factors, "deinfer", WorkerGroup(p))
            rng = np.random.Generator(np.random.PCG64(rc.seed))
            sess = PagedDecodeSession(model, cs.block_size, cs.num_blocks, cs.max_tokens,
                                      max_seqs=len(prompt_lens), free_order=rng.permutation(cs.num_blocks))
            prompts = {f"s{i}": list(_tokens(rc, n, salt=i)) for i, n in enumerate(prompt_lens)}
            out, _, _ = sess.prefill(prompts)
            worst_logit = worst_recon = 0.0
            identities = sess.buffer_identities()
            for _ in range(decode_steps):
                nxt = {s: int(np.argmax(v[-1])) for s, v in out.items()}
                out, _, _ = sess.decode(nxt)
                for s, rows in out.items():
                    ref, _ = model.forward(sess.history[s])
                    worst_logit = max(worst_logit, float(np.abs(ref[-1] - rows[-1]).max()))
                worst_recon = max(worst_recon, sess.reconstruction_error())
            allocs = sum(w.guard.allocations_in_replay for w in sess.workers)
            sigs_constant = all(step == sess.signature_log[0] for step in sess.signature_log)
            ids_constant = sess.buffer_identities() == identities
            ok = worst_logit <= EQUIV_TOL and worst_recon <= RECON_TOL and allocs == 0 and sigs_constant and ids_constant
            return ok, (f"logits {worst_logit:.3e}, reconstruction {worst_recon:.3e}, replay allocations {allocs}, "
                        f"signatures constant {sigs_constant}, buffer identities constant {ids_constant}")
        props.append(_guarded("kvcache", f"paged decode p={p}", run))

    def scan():
        rng = np.random.Generator(np.random.PCG64(rc.seed))
        for _ in range(scan_trials):
            n = int(rng.integers(1, 9))
            perm = [int(b) for b in rng.permutation(n)]
            table = BlockTable(n, 1, free_order=perm)
            table.allocate_blocks("s", n)
            if len(scan_contiguous_runs(table, "s")) != scan_oracle(perm):
                return False, f"run count differs from oracle on {perm}"
        return True, f"{scan_trials} random permutations match the exhaustive oracle"
    props.append(_guarded("kvcache", "run scan minimality", scan))
    return props


def cost_suite(rc, n_tokens=4):
    cfg = rc.model
    inputs = rc.cost_inputs()
    weights = random_weights(cfg, rc.vocab_size, rc.seed)
    factors = decompose_model(weights.layers, rc.plan()).factors
    toks = _tokens(rc, n_tokens)
    props = []
    rep = costmodel.block_cost(inputs)
    t = rep.totals
    ok = t["measured"]["total"] <= t["paper"]["total"] <= t["unoptimized"]["total"]
    props.append(Property("cost", "convention ordering", ok,
                          f"measured {t['measured']['total']} <= paper {t['paper']['total']} <= unoptimized {t['unoptimized']['total']}"))
    for p in rc.tp:
        if p == 1:
            continue
        for mode in ("dense", "base", "deinfer"):
            def run(p=p, mode=mode):
                layers = weights.layers if mode == "dense" else factors
                _, trace = TPModel(cfg, weights, layers, mode, WorkerGroup(p)).forward(toks)
                table = costmodel.compare_with_measured(inputs, trace.ledger, mode, tokens=n_tokens)
                return True, f"{len(table)} sub-layer volumes match"
            props.append(_guarded("cost", f"ledger reconciliation {mode} p={p}", run))
    return props


def run_suites(rc, suite="all", decode_steps=16):
    chosen = SUITES if suite == "all" else (suite,)
    props = []
    for s in chosen:
        if s == "equivalence":
            props += equivalence_suite(rc)
        elif s == "census":
            props += census_suite(rc)
        elif s == "kvcache":
            props += kvcache_suite(rc, decode_steps=decode_steps)
        elif s == "cost":
            props += cost_suite(rc)
        else:
            raise ConfigError(f"unknown suite {s!r}")
    return props
