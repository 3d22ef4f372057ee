"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes follow the small conv net on 28x28 MNIST batches (batch 128).
"""
import argparse
import json
import sys
import timeit

import numpy as np

from unlearnable import _kernels_py as py

try:
    from unlearnable import _ckernels as cy
except ImportError:
    cy = None

CASES = [
    # name, input shape, kernel, stride, pad
    ("conv1 im2col", (128, 1, 28, 28), 3, 1, 1),
    ("conv2 im2col", (128, 16, 14, 14), 3, 1, 1),
]
POOLS = [("pool1", (128, 16, 28, 28), 2, 2), ("pool2", (128, 32, 14, 14), 2, 2)]


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat):
    rng = np.random.default_rng(0)
    rows = []
    backends = [("python", py)] + ([("cython", cy)] if cy is not None else [])
    for name, shape, k, s, p in CASES:
        x = rng.standard_normal(shape)
        cols = py.im2col(x, k, k, s, p)
        for op, call in (("im2col", lambda m: m.im2col(x, k, k, s, p)),
                         ("col2im", lambda m: m.col2im(cols, shape, k, k, s, p))):
            times = {b: bench(lambda m=m: call(m), repeat) for b, m in backends}
            rows.append({"case": name.replace("im2col", op), "times": times})
    for name, shape, k, s in POOLS:
        x = rng.standard_normal(shape)
        out, arg = py.maxpool2d_forward(x, k, s)
        g = rng.standard_normal(out.shape)
        for op, call in (("forward", lambda m: m.maxpool2d_forward(x, k, s)),
                         ("backward", lambda m: m.maxpool2d_backward(g, arg, shape, k, s))):
            times = {b: bench(lambda m=m: call(m), repeat) for b, m in backends}
            rows.append({"case": f"{name} {op}", "times": times})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; timing the numpy fallback only", file=sys.stderr)
    rows = run(args.repeat)
    print(f"{'case':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for r in rows:
        t = r["times"]
        c = t.get("cython")
        speed = f"{t['python'] / c:>9.1f}x" if c else f"{'-':>10}"
        print(f"{r['case']:<18}{1e3 * t['python']:>12.2f}{(1e3 * c if c else float('nan')):>12.2f}{speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
