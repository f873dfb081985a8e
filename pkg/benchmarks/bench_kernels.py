"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from wireglue import _pykernels

try:
    from wireglue import _ckernels
except ImportError:
    _ckernels = None


def _cases(rng):
    cost = rng.uniform(0, 1, (120, 120))
    pts = rng.uniform(0, 320, (400, 2))
    segs = rng.uniform(0, 320, (150, 2, 2))
    samples = rng.uniform(0, 320, (150, 10, 2))
    valid = rng.random((150, 10)) > 0.1
    return {
        "lsap_square 120x120": lambda m: m.lsap_square(cost),
        "cluster_labels 400 pts": lambda m: m.cluster_labels(pts, 3.0),
        "point_segment_distance 400x150": lambda m: m.point_segment_distance(pts, segs),
        "closeness_counts 150x10x150": lambda m: m.closeness_counts(samples, valid, segs, 5.0),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:34s} {t_py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
