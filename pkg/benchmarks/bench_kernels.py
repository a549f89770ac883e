"""Compare the compiled evaluation kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N time per call for each kernel and backend, and the
speedup. Exits non-zero if the two backends disagree on any workload.
"""
import argparse
import sys
import timeit

import numpy as np

from hkdsearch.eval import _kernels_py

try:
    from hkdsearch.eval import _kernels
except ImportError:
    _kernels = None


def boxes(rng, n):
    xy = rng.uniform(0, 500, (n, 2))
    return np.hstack([xy, xy + rng.uniform(10, 80, (n, 2))])


def workloads(rng):
    dets, gts = boxes(rng, 300), boxes(rng, 40)
    # a gallery-sized ranking: 50 images with a few hundred detections in all
    flags = (rng.random(2000) < 0.05).astype(np.uint8)
    many = [(boxes(rng, 12), boxes(rng, 4)) for _ in range(200)]
    return {
        "iou_matrix 300x40": lambda k: k.iou_matrix(dets, gts),
        "greedy_match 300x40": lambda k: k.greedy_match(dets, gts, 0.5),
        "greedy_match 200 x (12x4)": lambda k: [k.greedy_match(d, g, 0.5) for d, g in many],
        "average_precision 2000": lambda k: k.average_precision(flags, int(flags.sum()) + 5),
        "interpolated_ap 2000": lambda k: k.interpolated_ap(flags, int(flags.sum()) + 5),
    }


def same(a, b):
    if isinstance(a, list):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    ok = True
    print(f"{'kernel':<28}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, fn in workloads(rng).items():
        if not same(fn(_kernels_py), fn(_kernels)):
            ok = False
            print(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.number, repeat=args.repeat)) / args.number
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:<28}{1e3 * t_py:>12.3f}{1e3 * t_cy:>13.3f}{t_py / t_cy:>8.1f}x")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
