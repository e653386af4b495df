"""Compiled vs pure-Python kernels: symmetric eigensolver and brute-force kNN.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dsclab import kernels


def _sym(d: int, rng) -> np.ndarray:
    a = rng.normal(size=(d, d))
    return np.ascontiguousarray((a + a.T) / 2)


def cases(rng):
    for d in (16, 32, 64, 128):
        m = _sym(d, rng)
        yield f"jacobi_eigh d={d}", lambda be, m=m: be.jacobi_eigh(m, 1e-12, 100)
    for n, q, d in ((2000, 500, 32), (5000, 1000, 32), (5000, 1000, 128)):
        store = rng.normal(size=(n, d))
        queries = rng.normal(size=(q, d))
        yield f"knn n={n} q={q} d={d}", lambda be, s=store, x=queries: be.knn_kth_distance(s, x, 10)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    names = kernels.available_backends()
    backends = {name: kernels.get_backend(name) for name in names}
    print(f"{'case':<28}" + "".join(f"{n:>14}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)):
        times = {}
        for name, be in backends.items():
            times[name] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        line = f"{label:<28}" + "".join(f"{times[n] * 1e3:>12.2f}ms" for n in names)
        if "compiled" in times and "python" in times:
            line += f"{times['python'] / times['compiled']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
