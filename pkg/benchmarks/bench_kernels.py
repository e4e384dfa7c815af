"""Compare the numba kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--epochs N]

Times each kernel on training-sized inputs under both backends, then times
whole training epochs on the default synthetic set. Numba compilation is
excluded by a warm-up call. Results are printed as a table; the ratio column
is numpy time / numba time (above 1 means numba is faster).
"""

import argparse
import time
import timeit

import numpy as np

from drft import kernels
from drft.config import RunConfig
from drft.data import SyntheticConfig, corpus_dataset, generate_synthetic
from drft.train import Trainer


def kernel_cases(rng):
    # row counts match a batch of 16 videos: B*H*T attention rows, B*T feature rows
    att = rng.normal(size=(16 * 4 * 16, 16)).astype(np.float32)
    y = kernels.softmax_fwd_np(att.copy())
    g = rng.normal(size=att.shape).astype(np.float32)
    x = rng.normal(size=(16 * 16, 32)).astype(np.float32)
    gamma, beta = np.ones(32, np.float32), np.zeros(32, np.float32)
    _, xhat, rstd = kernels.layernorm_fwd_np(x, gamma, beta, 1e-5)
    gx = rng.normal(size=x.shape).astype(np.float32)
    a = np.sort(rng.uniform(size=(10_000, 2)), axis=1)
    b = np.sort(rng.uniform(size=(10_000, 2)), axis=1)
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(att),
        "softmax_bwd": lambda: kernels.softmax_bwd(y, g),
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, gamma, beta, 1e-5),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(gx, xhat, rstd, gamma),
        "tiou (10k pairs)": lambda: kernels.tiou(a, b),
    }


def time_kernels(repeat):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    out = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        for name, fn in cases.items():
            fn()  # warm-up / compile
            best = min(timeit.repeat(fn, number=50, repeat=repeat)) / 50
            out[(name, backend)] = best
    return out, list(cases)


def time_epochs(epochs):
    corpus = generate_synthetic(SyntheticConfig(seed=0))
    train = corpus_dataset(corpus, "train")
    out = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        trainer = Trainer(RunConfig({"seed": 0}), train)
        trainer.train_epoch()  # warm-up
        t0 = time.perf_counter()
        for _ in range(epochs):
            trainer.train_epoch()
        out[backend] = (time.perf_counter() - t0) / epochs
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=5)
    args = parser.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    previous = kernels.backend

    times, names = time_kernels(args.repeat)
    print(f"{'kernel':<18} {'numpy (us)':>11} {'numba (us)':>11} {'ratio':>7}")
    for name in names:
        t_np, t_nb = times[(name, "numpy")], times[(name, "numba")]
        print(f"{name:<18} {t_np * 1e6:>11.1f} {t_nb * 1e6:>11.1f} {t_np / t_nb:>7.2f}")

    epoch = time_epochs(args.epochs)
    print(f"\ntraining epoch, 64 videos: numpy {epoch['numpy']:.3f}s, numba {epoch['numba']:.3f}s, "
          f"ratio {epoch['numpy'] / epoch['numba']:.2f}")
    kernels.set_backend(previous)


if __name__ == "__main__":
    main()
