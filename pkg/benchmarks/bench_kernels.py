"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py --size 32 --repeat 5
"""

import argparse
import json

from lowrank_tp.bench import bench_kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32, help="matrix / row count per kernel call")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3, help="calls per timing sample")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    res = bench_kernels(size=args.size, repeat=args.repeat, number=args.number)
    if args.json:
        print(json.dumps(res, indent=2, sort_keys=True))
        return
    backends = res["backends"]
    head = f"{'kernel':<14}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) > 1:
        head += f"{'speedup':>10}"
    print(f"size={res['size']}")
    print(head)
    for name, row in res["kernels"].items():
        line = f"{name:<14}" + "".join(f"{row[b] * 1e6:>16.1f}" for b in backends)
        if "speedup" in row:
            line += f"{row['speedup']:>9.1f}x"
        print(line)
    if len(backends) == 1:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
