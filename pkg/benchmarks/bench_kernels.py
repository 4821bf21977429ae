"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each kernel runs once untimed (JIT compile), then ``--repeat`` times per path;
the best wall time is reported.  The path is switched through
SHHLAB_DISABLE_NUMBA, exactly as users would.
"""
import argparse
import os
import time

import numpy as np

from shhlab.benchmarks import nonholonomic_benchmark
from shhlab.noise import NoiseModel, bounded_paths
from shhlab.nonsmooth import InfConvolution, inf_conv_control, inf_conv_value


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    h = 1e-3
    dw = rng.standard_normal((64, 20_000, 1)) * np.sqrt(h)
    z0 = np.zeros((64, 1))
    tsb = NoiseModel("tsb")
    robot = nonholonomic_benchmark()
    ic = InfConvolution(robot.pair_or_clf, 0.1)
    xs = rng.uniform(-1.5, 1.5, (256, 3))
    return {
        "bounded noise, 64 x 2e4 steps": lambda: bounded_paths(tsb, z0, dw, h),
        "prox search, 256 robot states": lambda: inf_conv_value(ic, xs),
        "inf-conv control, 256 states": lambda: inf_conv_control(ic, robot.system, xs, 41,
                                                                 "state"),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    results = {}
    for label, flag in (("numba", None), ("numpy", "1")):
        if flag is None:
            os.environ.pop("SHHLAB_DISABLE_NUMBA", None)
        else:
            os.environ["SHHLAB_DISABLE_NUMBA"] = flag
        for name, fn in cases().items():
            results.setdefault(name, {})[label] = best_time(fn, args.repeat)
    width = max(map(len, results))
    print(f"{'kernel':<{width}}  {'numba s':>9}  {'numpy s':>9}  {'speedup':>8}")
    for name, t in results.items():
        print(f"{name:<{width}}  {t['numba']:9.4f}  {t['numpy']:9.4f}  "
              f"{t['numpy'] / t['numba']:7.1f}x")


if __name__ == "__main__":
    main()
