"""Time the compiled batch kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per (architecture, batch size, kernel) with the median time per
call for each backend, the speedup, and the backend the dispatcher uses.
"""
import argparse
import sys
import timeit

import numpy as np

from gradprop import _fallback, kernels
from gradprop import netcore as nc

try:
    from gradprop import _core
except ImportError:
    _core = None

SHAPES = [
    ("bandit desk", [5, 50, 20, 3]),
    ("bandit critic", [8, 50, 20, 1]),
    ("bandit full", [28, 300, 100, 7]),
    ("mdp critic", [4, 100, 40, 1]),
]
BATCHES = [1, 32, 256]


def _median_time(fn, repeat):
    number = max(1, int(0.02 / max(timeit.timeit(fn, number=1), 1e-7)))
    times = timeit.repeat(fn, number=number, repeat=repeat)
    return float(np.median(times)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=7)
    args = p.parse_args(argv)
    if _core is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    print(f"{'net':<14}{'sizes':<18}{'batch':>6} {'kernel':<9}{'numpy us':>10}{'cython us':>11}{'speedup':>9}  default")
    for name, sizes in SHAPES:
        net = nc.init_network(sizes, None, 0)
        args_ = (net.params, net._sizes_arr, net._relu_arr)
        for b in BATCHES:
            X = rng.standard_normal((b, sizes[0]))
            G = rng.standard_normal((b, sizes[-1]))
            pre = _fallback.forward_batch(*args_, X)
            calls = {
                "forward": lambda m: m.forward_batch(*args_, X),
                "backward": lambda m: m.backward_batch(*args_, X, pre, G),
            }
            for kernel, call in calls.items():
                t_np = _median_time(lambda: call(_fallback), args.repeat)
                if _core is not None:
                    t_cy = _median_time(lambda: call(_core), args.repeat)
                    cy, speed = f"{t_cy * 1e6:11.1f}", f"{t_np / t_cy:8.2f}x"
                else:
                    cy, speed = f"{'-':>11}", f"{'-':>9}"
                picked = kernels._pick(X, net.params).BACKEND
                print(f"{name:<14}{str(sizes):<18}{b:>6} {kernel:<9}{t_np * 1e6:10.1f}{cy}{speed}  {picked}")


if __name__ == "__main__":
    main()
