"""Time the compiled kernels against the numpy fallback on training-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 200]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from haris import _pykernels

try:
    from haris import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNELS = ("im2col3x3", "col2im3x3", "upsample2x", "upsample2x_backward")


def cases(rng):
    x = rng.normal(size=(8, 8, 8, 64))
    cols = rng.normal(size=(8, 8, 8, 9 * 64))
    up = rng.normal(size=(8, 16, 16, 32))
    return {
        "im2col3x3": (x,),
        "col2im3x3": (cols, 64),
        "upsample2x": (up,),
        "upsample2x_backward": (rng.normal(size=(8, 32, 32, 32)),),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    args_by_kernel = cases(np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy us':>12}{'cython us':>12}{'speedup':>10}  identical")
    for name in KERNELS:
        a = args_by_kernel[name]
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if _ckernels is None:
            print(f"{name:<22}{t_py:>12.1f}{'n/a':>12}")
            continue
        cy = getattr(_ckernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        same = np.array_equal(py(*a), cy(*a))
        print(f"{name:<22}{t_py:>12.1f}{t_cy:>12.1f}{t_py / t_cy:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
