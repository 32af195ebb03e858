"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow one default training batch of the CNN stage (batch 128,
window 4, 35 features) and one ingest run (KNN imputation, dedup scan).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from impactcast import _accel, _kernels


def _cases(rng):
    cases = {}
    for name, (C, W, K) in {"conv1": (1, 35, 32), "conv2": (32, 16, 64), "conv3": (64, 7, 64)}.items():
        x = rng.normal(size=(128, C, 4, W))
        w = rng.normal(size=(K, C, 1, 3))
        b = rng.normal(size=K)
        g = rng.normal(size=(128, K, 4, W - 2))
        cases[f"{name} fwd"] = lambda x=x, w=w, b=b: _kernels.conv2d_forward(x, w, b)
        cases[f"{name} bwd"] = lambda x=x, w=w, g=g: _kernels.conv2d_backward(x, w, g)
    y = rng.normal(size=(128, 32, 4, 33))
    out, arg = _kernels.maxpool_forward(y, 1, 2)
    cases["maxpool fwd"] = lambda: _kernels.maxpool_forward(y, 1, 2)
    cases["maxpool bwd"] = lambda: _kernels.maxpool_backward(out, arg, y.shape, 1, 2)
    n = 20_000
    t = np.sort(rng.uniform(0, 4000, n))
    lat, lon = rng.uniform(33.8, 34.3, n), rng.uniform(-118.6, -118.1, n)
    cases["nearest_k"] = lambda: _kernels.nearest_k(2000.0, 34.0, -118.3, t, lat, lon, 2)
    ts = np.sort(rng.integers(0, 15_000_000, n))
    street = rng.integers(0, 500, n)
    cases["duplicate_scan"] = lambda: _kernels.duplicate_scan(ts, lat, lon, street, 300, 0.1)
    return cases


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    timings, results = {}, {}
    for backend in ("numpy", "numba"):
        _accel.set_backend(backend)
        for name, fn in _cases(np.random.default_rng(args.seed)).items():
            results[backend, name] = fn()  # also triggers compilation
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                fn()
            timings[backend, name] = (time.perf_counter() - t0) / args.repeat
    _accel.set_backend("auto")

    names = list(_cases(np.random.default_rng(args.seed)))
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}  agree")
    for name in names:
        a, b = timings["numpy", name], timings["numba", name]
        agree = _same(results["numpy", name], results["numba", name])
        print(f"{name:16s} {a * 1e3:10.3f} {b * 1e3:10.3f} {a / b:9.2f}  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
