"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--repeats 7] [--out results.json]

Each kernel runs on identical inputs through both implementations; outputs
are cross-checked before timing.
"""

import argparse
import json
import sys
import time

import numpy as np

from hexburst import _kernels_py as py

try:
    from hexburst import _kernels as cy
except ImportError:
    cy = None


def _median(fn, repeats):
    fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cases(rng):
    x = rng.random((4, 16, 64, 64)).astype(np.float32)
    flow = (rng.standard_normal((4, 2, 64, 64)) * 3).astype(np.float32)
    g = rng.random(x.shape).astype(np.float32)
    ref = rng.random((64, 64)).astype(np.float32)
    other = np.roll(ref, (2, -3), axis=(0, 1))
    xp = rng.random((4, 16, 66, 66)).astype(np.float32)
    cols = py.im2col(xp, 3, 3, 1, 1)
    return {
        "warp_forward 4x16x64x64": lambda k: k.warp_forward(x, flow),
        "warp_backward 4x16x64x64": lambda k: k.warp_backward(x, flow, g),
        "block_match 64x64 +-8": lambda k: k.block_match(ref, other, 8),
        "im2col 3x3 4x16x66x66": lambda k: k.im2col(xp, 3, 3, 1, 1),
        "col2im 3x3 4x16x66x66": lambda k: k.col2im(cols, xp.shape, 3, 3, 1, 1),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(u, v) for u, v in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-4, atol=1e-4)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name, "python_s": _median(lambda: fn(py), args.repeats)}
        if cy is not None:
            if not _close(fn(py), fn(cy)):
                raise SystemExit(f"{name}: implementations disagree")
            row["cython_s"] = _median(lambda: fn(cy), args.repeats)
            row["speedup"] = row["python_s"] / row["cython_s"]
        rows.append(row)
    print(f"{'kernel':28s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s}")
    for r in rows:
        c = r.get("cython_s")
        print(f"{r['kernel']:28s} {1e3 * r['python_s']:12.3f} "
              f"{'' if c is None else f'{1e3 * c:12.3f}':>12s} {r.get('speedup', float('nan')):8.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows


if __name__ == "__main__":
    main()
