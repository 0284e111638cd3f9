"""Compiled vs numpy timings for the brute-force kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on the same inputs under both backends; results are
checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from dense_align import _kernels_py as py
from dense_align.mdp import random_mdp

try:
    from dense_align import _kernels as ext
except ImportError:
    ext = None


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    """(label, kernel name, arguments)."""
    for ns, na, n in [(6, 4, 4), (8, 3, 7), (10, 4, 8)]:
        mdp = random_mdp(rng, ns, na, n, all_initial=True)
        starts = np.arange(ns)
        yield (f"enumerate  S={ns} A={na} N={n}", "enumerate_paths",
               (mdp.transition, starts, na, n))
        states, actions = py.enumerate_paths(mdp.transition, starts, na, n)
        yield (f"path sums  M={states.shape[0]}", "discounted_path_sums",
               (rng.normal(size=(ns, na)), states, actions, 0.9))
    for m in (1000, 4000):
        score, log_z, ratio = rng.normal(size=(3, m))
        yield f"pair gap   M={m} ({m * m:.1e} pairs)", "min_pairwise_gap", (score, log_z, ratio, 2.0)


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if ext is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36} {'numpy ms':>10} {'compiled ms':>11} {'speedup':>8}")
    for name, kernel, inputs in cases(rng):
        f_py = getattr(py, kernel)
        t_py = _best(lambda: f_py(*inputs), args.repeat)
        if ext is None:
            print(f"{name:<36} {1e3 * t_py:>10.3f} {'-':>11} {'-':>8}")
            continue
        f_ext = getattr(ext, kernel)
        if not _agree(f_py(*inputs), f_ext(*inputs)):
            raise SystemExit(f"backends disagree on {name}")
        t_ext = _best(lambda: f_ext(*inputs), args.repeat)
        print(f"{name:<36} {1e3 * t_py:>10.3f} {1e3 * t_ext:>11.3f} {t_py / t_ext:>7.1f}x")


if __name__ == "__main__":
    main()
