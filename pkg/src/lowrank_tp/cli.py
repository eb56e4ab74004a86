"""``lowrank-tp`` command-line front end.

Subcommands: ``cost``, ``check``, ``decompose``, ``bench``, ``bench-kernels``
and ``init-weights``. Without ``--config`` a small built-in GQA model is used.
Exit codes: 0 success, 1 a property failed, 2 bad input or configuration.
"""

import argparse
import json
import re
import sys

from . import archive, bench, checks, costmodel, runconfig
from .decomposition import MATRIX_NAMES, decompose_matrix, rank_from_ratio
from .errors import ConfigError, LowRankTPError, PlanError, ShapeError
from .linalg import frobenius
from .pipelines.model import random_weights

DEFAULT_CONFIG = {
    "model": {"num_heads": 4, "num_kv_heads": 2, "head_dim": 8, "intermediate_dim": 64,
              "mlp_variant": "GLU", "use_rope": True, "num_layers": 1},
    "ranks": {"q": 16, "k": 8, "v": 8, "o": 16, "up": 16, "gate": 16, "down": 16},
    "tp": [1, 2, 4],
    "seed": 0,
}
PRNG = "PCG64"


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(args, text):
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def _tp_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--tp expects a comma-separated list of integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("--tp needs at least one value")
    return values


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed expects an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("--seed must fit in an unsigned 64-bit integer")
    return v


def load_run_config(args):
    d = _read_json(args.config) if args.config else DEFAULT_CONFIG
    ranks = _read_json(args.ranks) if args.ranks else None
    return runconfig.from_dict(d, ranks_override=ranks, tp_override=args.tp, seed_override=args.seed,
                               convention_override=args.convention)


def _fmt(n):
    return f"{n:,}"


def render_cost_table(report):
    header = ("layer", "status", "convention", "all_gather", "reduce_sum", "total")
    rows = [(r.layer, r.status, r.convention or "-", _fmt(r.all_gather), _fmt(r.reduce_sum), _fmt(r.total))
            for r in report.rows]
    widths = [max(len(str(x[i])) for x in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append("")
    pct = report.saved_percent()
    for name, t in report.totals.items():
        if name == "model":
            continue
        saved = f"  saved {pct[name]:.2f}%" if name in pct else ""
        lines.append(f"{name} total: {_fmt(t['total'])} (all_gather {_fmt(t['all_gather'])}, "
                     f"reduce_sum {_fmt(t['reduce_sum'])}){saved}")
    layers = report.inputs.num_layers
    if layers > 1:
        lines.append("model totals (x%d layers): %s" % (
            layers, ", ".join(f"{k} {_fmt(v)}" for k, v in report.totals["model"].items())))
    return "\n".join(lines) + "\n"


def cmd_cost(args):
    rc = load_run_config(args)
    report = costmodel.block_cost(rc.cost_inputs(), rc.conventions())
    if args.format == "json":
        _emit(args, _dump(report.to_dict()))
    else:
        _emit(args, render_cost_table(report))
    return 0


def cmd_check(args):
    rc = load_run_config(args)
    props = checks.run_suites(rc, args.suite, decode_steps=args.decode_steps)
    failed = [p for p in props if not p.passed]
    if args.format == "json":
        _emit(args, _dump({"seed": rc.seed, "prng": PRNG, "tp": rc.tp, "suite": args.suite,
                           "passed": not failed, "properties": [p.to_dict() for p in props]}))
    else:
        lines = [f"{'PASS' if p.passed else 'FAIL'}  {p.suite}: {p.name}  ({p.detail})" for p in props]
        lines.append(f"{len(props) - len(failed)}/{len(props)} properties passed (seed {rc.seed})")
        _emit(args, "\n".join(lines) + "\n")
    return 1 if failed else 0


_LAYER_NAME = re.compile(r"^(?P<prefix>(?:.*\.)?)(?P<name>" + "|".join(MATRIX_NAMES) + r")$")


def plan_archive(tensors, ranks=None, ratio=None, config=None):
    """Map each decomposable tensor name to its rank.

    Tensors are matched by their final dotted component (``layers.0.q`` or
    just ``q``). With a rank map every listed matrix must exist under every
    prefix; with a config every layer of the model must be present.
    """
    groups = {}
    for full in tensors:
        m = _LAYER_NAME.match(full)
        if m:
            groups.setdefault(m["prefix"], set()).add(m["name"])
    if config is not None:
        prefixes = [f"layers.{i}." for i in range(config.num_layers)]
        names = list(config.matrix_shapes())
    else:
        prefixes = sorted(groups)
        names = list(ranks) if ranks else None
    if not prefixes:
        raise PlanError("archive holds no decomposable tensors")
    shapes = config.matrix_shapes() if config is not None else {}
    plan = {}
    for prefix in prefixes:
        for name in names or sorted(groups.get(prefix, ())):
            full = prefix + name
            if full not in tensors:
                raise PlanError(f"plan needs tensor {full!r}, which the archive does not contain")
            w = tensors[full]
            if name in shapes and tuple(w.shape) != tuple(shapes[name]):
                raise ShapeError(f"tensor {full!r} has shape {w.shape}, config expects {shapes[name]}")
            if ranks is not None:
                if name not in ranks:
                    raise PlanError(f"no rank given for matrix {name!r}")
                plan[full] = int(ranks[name])
            else:
                plan[full] = rank_from_ratio(ratio, *w.shape)
    return plan


def cmd_decompose(args):
    tensors = archive.read_archive(args.input)
    config, ranks, ratio = None, None, args.ratio
    if ratio is None:
        if args.ranks:
            ranks = _read_json(args.ranks)
        elif args.config:
            rc = load_run_config(args)
            config, ranks, ratio = rc.model, rc.ranks() if rc.explicit_ranks else None, rc.compression_ratio
        else:
            raise PlanError("decompose needs --ratio, --ranks or --config")
    plan = plan_archive(tensors, ranks, ratio, config)
    out = {}
    report = []
    for name, w in tensors.items():
        if name not in plan:
            out[name] = w
            continue
        pair = decompose_matrix(w, plan[name])
        out[f"{name}.down"] = pair.down
        out[f"{name}.up"] = pair.up
        norm = frobenius(w)
        err = frobenius(w - pair.down @ pair.up)
        report.append({"name": name, "shape": list(w.shape), "rank": plan[name],
                       "relative_error": err / norm if norm else err})
    archive.write_archive(args.output, out)
    if args.format == "json":
        _emit(args, _dump({"output": args.output, "matrices": report}))
    else:
        lines = [f"{r['name']:<20} {r['shape'][0]}x{r['shape'][1]:<8} rank {r['rank']:<6} "
                 f"relative error {r['relative_error']:.3e}" for r in report]
        lines.append(f"wrote {len(out)} tensors to {args.output}")
        _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_bench(args):
    rc = load_run_config(args)
    runs = [bench.bench_pipeline(rc, args.pipeline, p, args.batch, args.prefill, args.decode,
                                 use_cache=not args.no_cache) for p in rc.tp]
    if args.format == "json":
        _emit(args, _dump({"seed": rc.seed, "prng": PRNG, "runs": runs}))
        return 0
    lines = []
    for r in runs:
        lines.append(f"{r['mode']} p={r['tp']} batch={r['batch']} prefill={r['prefill']} decode={r['decode']} "
                     f"kv_cache={r['kv_cache']}")
        for i, s in enumerate(r["steps"]):
            led = s["ledger"]
            lines.append(f"  step {i:<3} {s['kind']:<8} {s['seconds'] * 1e3:9.3f} ms  tokens {s['tokens']:<4} "
                         f"gather {_fmt(led['all_gather_volume'])}  reduce {_fmt(led['reduce_sum_volume'])}  "
                         f"attn flops/worker {_fmt(max(s['attention_flops']))}")
        total = sum(s["ledger"]["total_volume"] for s in r["steps"])
        lines.append(f"  total tokens {sum(s['tokens'] for s in r['steps'])}, total volume {_fmt(total)}")
    _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_bench_kernels(args):
    res = bench.bench_kernels(size=args.size, repeat=args.repeat)
    if args.format == "json":
        _emit(args, _dump(res))
        return 0
    lines = [f"backends: {', '.join(res['backends'])} (size {res['size']})"]
    for name, row in res["kernels"].items():
        cells = "  ".join(f"{b} {row[b] * 1e6:10.2f} us" for b in res["backends"])
        speed = f"  speedup {row['speedup']:.1f}x" if "speedup" in row else ""
        lines.append(f"{name:<15} {cells}{speed}")
    _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_init_weights(args):
    rc = load_run_config(args)
    weights = random_weights(rc.model, rc.vocab_size, rc.seed)
    archive.write_archive(args.output, archive.weights_to_tensors(weights))
    sys.stderr.write(f"wrote {args.output} ({PRNG} seed {rc.seed})\n")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (default: built-in toy GQA model)")
    common.add_argument("--ranks", metavar="PATH", help="JSON map of matrix name to rank; overrides the config")
    common.add_argument("--tp", type=_tp_list, metavar="LIST", help="comma-separated worker counts, e.g. 1,2,4")
    common.add_argument("--seed", type=_u64, metavar="U64")
    common.add_argument("--convention", choices=sorted(runconfig.CONVENTIONS))
    common.add_argument("--format", choices=("table", "json"), default="table")
    common.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")

    parser = argparse.ArgumentParser(prog="lowrank-tp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", parents=[common], help="per-token communication volume report")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("check", parents=[common], help="run property suites")
    p.add_argument("--suite", choices=(*checks.SUITES, "all"), default="all")
    p.add_argument("--decode-steps", type=int, default=16)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("decompose", parents=[common], help="factor every weight matrix of an archive")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ratio", type=float, help="compression ratio in [0, 1)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("bench", parents=[common], help="desk-scale serving benchmark")
    p.add_argument("--pipeline", choices=("dense", "base", "deinfer"), default="deinfer")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--prefill", type=int, default=8)
    p.add_argument("--decode", type=int, default=8)
    p.add_argument("--no-cache", action="store_true", help="recompute history instead of using the paged cache")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bench-kernels", parents=[common], help="compiled vs pure-Python kernel timings")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench_kernels)

    p = sub.add_parser("init-weights", parents=[common], help="write a seeded random weight archive")
    p.add_argument("output")
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LowRankTPError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"lowrank-tp {args.command}: error: {msg}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
