"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from avur import kernels


def cases(rng):
    a = rng.integers(0, 20, size=60)
    b = rng.integers(0, 20, size=55)
    x = rng.normal(size=(5000, 16))
    c = rng.normal(size=(32, 16))
    labels = np.repeat(rng.integers(0, 16, size=2000), rng.integers(1, 5, size=2000))
    return {
        "edit_distance 60x55": lambda impl: kernels.edit_distance(a, b, impl),
        "nearest_centroid 5000x32x16": lambda impl: kernels.nearest_centroid(x, c, impl),
        f"run_starts n={labels.size}": lambda impl: kernels.run_starts(labels, impl),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=20)
    args = parser.parse_args(argv)
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name in impls) + ("       speedup" if len(impls) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for name, impl in impls.items():
            best = min(timeit.repeat(lambda: fn(impl), repeat=args.repeat, number=args.number))
            times[name] = best / args.number
        row = f"{label:32s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:13.1f}x"
        print(row)


if __name__ == "__main__":
    main()
