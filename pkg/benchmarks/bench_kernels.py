"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--side 32] [--angles 180] [--repeat 5]

Both backends run in the same process (the ``backend=`` argument bypasses
``DAWNFM_NO_NUMBA``); the first numba call is timed separately because it
includes JIT compilation or cache loading.
"""
import argparse
import time
import timeit

import numpy as np

from dawnfm import _kernels
from dawnfm.core import make_rng
from dawnfm.operators import RadonOperator


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=32)
    ap.add_argument("--angles", type=int, default=180)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    _kernels.retain_freed_memory()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = make_rng(0)
    op = RadonOperator(args.side, args.angles)
    geom = op._geom()
    img = rng.standard_normal((args.batch, args.side, args.side))
    sino = rng.standard_normal((args.batch,) + op.range_shape)
    feat = rng.standard_normal((args.batch, args.side, args.side, args.channels))

    cases = {
        "radon_forward": lambda b: _kernels.radon_forward(img, *geom, backend=b),
        "radon_adjoint": lambda b: _kernels.radon_adjoint(sino, *geom, args.side, backend=b),
        "im2col_3x3": lambda b: _kernels.im2col(feat, 3, backend=b),
    }
    print(f"side={args.side} angles={args.angles} batch={args.batch} channels={args.channels}")
    print(f"{'kernel':<15}{'first numba':>13}{'numba':>11}{'numpy':>11}{'speedup':>9}{'max diff':>11}")
    for name, fn in cases.items():
        t0 = time.perf_counter()
        a = fn("numba")
        first = time.perf_counter() - t0
        b = fn("numpy")
        tn = best_of(lambda: fn("numba"), args.repeat)
        tp = best_of(lambda: fn("numpy"), args.repeat)
        diff = float(np.max(np.abs(a - b)))
        print(f"{name:<15}{first:>12.3f}s{tn:>10.4f}s{tp:>10.4f}s{tp / tn:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
