"""Timing comparison of the two kernel backends.

Runs each kernel on training-shaped inputs under both implementations and
prints per-call microseconds plus the speedup.  Usage:

    python3 benchmarks/bench_kernels.py [--repeat 200] [--dtype f32|f64]
"""

import argparse
import time

import numpy as np

from tgpt import rng as rngmod
from tgpt.numerics import backend

ROWS, D, N = 512, 64, 16


def _cases(dtype):
    rng = rngmod.stream(99, "bench/inputs")
    f = lambda *shape: rng.normal(0.0, 1.0, shape).astype(dtype)  # noqa: E731
    x = f(ROWS, D)
    gamma, beta, dy = f(D), f(D), f(ROWS, D)
    logits = f(ROWS, N)
    targets = np.arange(ROWS, dtype=np.int64) % N
    rowscale = np.full(ROWS, 1.0 / ROWS, dtype=dtype)
    grad = f(ROWS, D)

    def adamw(k):
        p = x.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        k.adamw_update(p, grad, m, v, 1, 1e-3, 0.9, 0.999, 1e-8, 0.01)
        return p

    def ln_bwd(k):
        _, mean, rstd = k.layer_norm_fwd(x, gamma, beta, 1e-5)
        return k.layer_norm_bwd(dy, x, gamma, mean, rstd)

    def l2_bwd(k):
        y, inv = k.l2norm_fwd(x, 1e-12)
        return k.l2norm_bwd(dy, y, inv)

    def ce_bwd(k):
        _, probs = k.cross_entropy_fwd(logits, targets)
        return k.cross_entropy_bwd(probs, targets, rowscale)

    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, gamma, beta, 1e-5),
        "layer_norm_bwd": ln_bwd,
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(dy, k.softmax_fwd(x)),
        "gelu_fwd": lambda k: k.gelu_fwd(x.reshape(-1)),
        "gelu_bwd": lambda k: k.gelu_bwd(dy.reshape(-1), x.reshape(-1)),
        "l2norm_fwd": lambda k: k.l2norm_fwd(x, 1e-12),
        "l2norm_bwd": l2_bwd,
        "cross_entropy_fwd": lambda k: k.cross_entropy_fwd(logits, targets),
        "cross_entropy_bwd": ce_bwd,
        "adamw_update": adamw,
    }


def _time(fn, kernels, repeat):
    fn(kernels)  # warm up, and fail fast on signature drift
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(kernels)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best * 1e6


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    args = parser.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64

    names = backend.available_backends()
    if len(names) < 2:
        print(f"only {names} available; build the compiled extension to compare")
    previous = backend.current_backend()
    modules = {}
    for name in names:
        backend.set_backend(name)
        modules[name] = backend.kernels
    backend.set_backend(previous)

    cases = _cases(dtype)
    width = max(len(n) for n in cases)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(f"rows={ROWS} d={D} classes={N} dtype={args.dtype} repeat={args.repeat}")
    print(header)
    print("-" * len(header))
    for case, fn in cases.items():
        times = [_time(fn, modules[n], args.repeat) for n in names]
        row = f"{case:<{width}}  " + "  ".join(f"{t:>10.1f}us" for t in times)
        if len(times) == 2 and times[1] > 0:
            row += f"  {times[0] / times[1]:>7.2f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
