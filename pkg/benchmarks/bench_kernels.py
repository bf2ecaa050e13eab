"""Time the compiled kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by ``TOWERLAB_NUMBA``. Compile time is excluded by a warm-up
call on tiny inputs.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from towerlab import kernels, backend_name

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
x0 = rng.random(2000)
ret0 = 0.5 * rng.random(20000)
R = rng.random((64, 20, 20)) / 400.0
xs = np.sort(rng.random(10**5))
grid = np.linspace(0.0, 1.0, 1001)
base = (rng.random((200, 256)) < 0.3).astype(np.float64)
L = rng.random(256)

cases = {
    "intermittent_orbits 2000x1000": lambda: kernels.intermittent_orbits(x0, 0.4, 1000),
    "return_times 2e4 starts": lambda: kernels.return_times(ret0, 0.4, 10**6),
    "renewal 20 cells, n=2000": lambda: kernels.renewal(R, 2000, 1.0),
    "tri_kde 1e5 points": lambda: kernels.tri_kde(xs, grid, 0.01),
    "visit_functional 200x256": lambda: kernels.visit_functional(base, L, 0.5),
}

# warm-up so JIT compilation is not timed
kernels.intermittent_orbits(x0[:2], 0.4, 2)
kernels.return_times(ret0[:2], 0.4, 10)
kernels.renewal(R[:2, :2, :2], 2, 1.0)
kernels.tri_kde(xs[:10], grid[:5], 0.1)
kernels.visit_functional(base[:2, :4], L[:4], 0.5)

out = {"backend": backend_name(), "times": {}}
for name, fn in cases.items():
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out["times"][name] = best
print(json.dumps(out))
"""


def run_backend(flag: str, repeat: int) -> dict:
    env = dict(os.environ, TOWERLAB_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast = run_backend("1", args.repeat)
    slow = run_backend("0", args.repeat)
    print(f"{'kernel':34s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name, tf in fast["times"].items():
        ts = slow["times"][name]
        print(f"{name:34s} {tf:10.4f} {ts:10.4f} {ts / tf:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
