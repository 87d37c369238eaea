"""Time the numba and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends come from ``partco.kernels.BACKENDS``; numba entries are warmed
up once before timing so compilation is excluded. Outputs are cross-checked.
"""
import argparse
import timeit

import numpy as np

from partco.kernels import BACKENDS


def cases(rng):
    sym = rng.standard_normal((64, 64))
    sym = sym @ sym.T
    cost = rng.random((128, 128))
    x = rng.standard_normal((50_000, 3))
    c = rng.standard_normal((10, 3))
    seg = rng.integers(-1, 10, x.shape[0])
    return {
        "jacobi_eigh (64x64)": ("jacobi_eigh", (sym, 1e-14, 100)),
        "hungarian_min (128x128)": ("hungarian_min", (cost,)),
        "nearest_centroid (50000x3, k=10)": ("nearest_centroid", (x, c)),
        "segment_sum (50000x3, 10 segs)": ("segment_sum", (x, seg, 10)),
    }


def _same(a, b, name):
    if name == "jacobi_eigh":
        return np.allclose(np.sort(a[0]), np.sort(b[0]), rtol=1e-9, atol=1e-9)
    a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
    return all(np.allclose(u, v) for u, v in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = sorted(BACKENDS)
    print(f"{'kernel':36s}" + "".join(f"{b:>14s}" for b in backends) + "   speedup  agree")
    for label, (name, inputs) in cases(np.random.default_rng(0)).items():
        times, outs = {}, {}
        for b in backends:
            fn = BACKENDS[b][name]
            outs[b] = fn(*inputs)  # warm-up / compile
            times[b] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        speed = (f"{times['numpy'] / times['numba']:9.1f}x" if "numba" in times else "      n/a")
        agree = all(_same(outs[backends[0]], outs[b], name) for b in backends[1:])
        print(f"{label:36s}" + "".join(f"{times[b] * 1e3:11.2f} ms" for b in backends)
              + f"{speed}  {agree}")


if __name__ == "__main__":
    main()
