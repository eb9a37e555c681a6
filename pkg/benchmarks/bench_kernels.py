"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--epoch]

Times conv2d forward/backward and max-pool on batch-32 tensors shaped like the
default network's layers, then optionally one training epoch on the desk
phantom set with each backend. Prints median wall-clock per call.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from inflrobust import datagen, kernels, training


def _median_time(fn, repeat: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng: np.random.Generator):
    x1 = rng.uniform(size=(32, 1, 32, 32))
    w1 = rng.standard_normal((16, 1, 3, 3))
    x2 = rng.uniform(size=(32, 16, 16, 16))
    w2 = rng.standard_normal((32, 16, 3, 3))
    b1, b2 = np.zeros(16), np.zeros(32)
    d1 = rng.standard_normal((32, 16, 32, 32))
    d2 = rng.standard_normal((32, 32, 16, 16))
    return {
        "conv1 forward": lambda k: k.conv2d_forward(x1, w1, b1, 1, 1),
        "conv1 backward": lambda k: k.conv2d_backward(x1, w1, d1, 1, 1, False),
        "conv2 forward": lambda k: k.conv2d_forward(x2, w2, b2, 1, 1),
        "conv2 backward": lambda k: k.conv2d_backward(x2, w2, d2, 1, 1, True),
        "maxpool forward": lambda k: k.maxpool2_forward(d1),
        "maxpool backward": lambda k: k.maxpool2_backward(
            d1[:, :, ::2, ::2].copy(), k.maxpool2_forward(d1)[1], 32, 32),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch", action="store_true", help="also time one training epoch per backend")
    args = ap.parse_args(argv)

    backends = [kernels.python_backend]
    if kernels.cython_backend is not None:
        backends.append(kernels.cython_backend)
    else:
        print("compiled extension not built; timing the numpy fallback only")

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'case':<18}" + "".join(f"{b.name:>12}" for b in backends) + "     speedup")
    for name, fn in cases.items():
        ts = [_median_time(lambda: fn(b), args.repeat) for b in backends]
        speed = f"{ts[0] / ts[-1]:9.2f}x" if len(ts) > 1 else ""
        print(f"{name:<18}" + "".join(f"{t * 1e3:10.2f}ms" for t in ts) + f"  {speed}")

    if args.epoch:
        ds = datagen.apply_noise_protocol(datagen.generate_phantoms(), datagen.NoiseSpec("gaussian", rho_test=0.5))
        cfg = training.TrainConfig(epochs=1, seed=0)
        ts = []
        for b in backends:
            prev = kernels.use_backend(b.name)
            ts.append(_median_time(lambda: training.train_naive(ds.train, cfg), max(1, args.repeat // 2)))
            kernels.use_backend(prev.name)
        speed = f"{ts[0] / ts[-1]:9.2f}x" if len(ts) > 1 else ""
        print(f"{'train epoch':<18}" + "".join(f"{t:11.2f}s" for t in ts) + f"  {speed}")


if __name__ == "__main__":
    main()
