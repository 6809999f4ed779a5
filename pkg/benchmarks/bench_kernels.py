"""Time the numba kernel path against the pure-numpy fallback.

The path is fixed at import time by the COSS_NUMBA environment variable, so
this script runs itself twice as a subprocess (once per path), collects the
timings as JSON, and prints a side-by-side table with speedups. Each worker
also reports a scalar digest per kernel so the two paths can be checked for
agreement.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --preset large --repeats 7
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

PRESETS = {
    "small": dict(adamw_n=200_000, pd_n=1024, pd_k=32, ms_n=512, ms_m=256,
                  dim=16),
    "medium": dict(adamw_n=1_000_000, pd_n=4096, pd_k=64, ms_n=2048,
                   ms_m=512, dim=32),
    "large": dict(adamw_n=4_000_000, pd_n=16384, pd_k=128, ms_n=8192,
                  ms_m=2048, dim=32),
}


def time_call(fn, repeats):
    """Best-of-N wall time in seconds; the first call warms up the JIT."""
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_worker(sizes, repeats, seed):
    from coss import kernels

    rng = np.random.default_rng(seed)
    out = {"path": "numba" if kernels.using_numba() else "numpy",
           "times": {}, "digests": {}}

    n = sizes["adamw_n"]
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)

    def adamw():
        kernels.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.05, 1)

    out["times"]["adamw_update"] = time_call(adamw, repeats)
    out["digests"]["adamw_update"] = float(np.abs(p).sum())

    x = rng.normal(size=(sizes["pd_n"], sizes["dim"]))
    c = rng.normal(size=(sizes["pd_k"], sizes["dim"]))
    out["times"]["pairwise_sqdist"] = time_call(
        lambda: kernels.pairwise_sqdist(x, c), repeats)
    out["digests"]["pairwise_sqdist"] = float(kernels.pairwise_sqdist(x, c).sum())

    a = rng.normal(size=(sizes["ms_n"], sizes["dim"]))
    b = rng.normal(size=(sizes["ms_m"], sizes["dim"]))
    out["times"]["min_sqdist"] = time_call(
        lambda: kernels.min_sqdist(a, b), repeats)
    out["digests"]["min_sqdist"] = float(kernels.min_sqdist(a, b).sum())

    json.dump(out, sys.stdout)


def spawn(flag, args):
    env = dict(os.environ, COSS_NUMBA=flag)
    cmd = [sys.executable, os.path.abspath(__file__), "--worker",
           "--preset", args.preset, "--repeats", str(args.repeats),
           "--seed", str(args.seed)]
    proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
    if proc.returncode != 0:
        sys.stderr.write(proc.stderr)
        raise SystemExit(f"worker with COSS_NUMBA={flag} failed")
    return json.loads(proc.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=sorted(PRESETS), default="medium")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)

    sizes = PRESETS[args.preset]
    if args.worker:
        run_worker(sizes, args.repeats, args.seed)
        return 0

    numba_res = spawn("1", args)
    numpy_res = spawn("0", args)
    if numba_res["path"] != "numba":
        print("note: numba unavailable, both runs used the numpy path")

    print(f"preset={args.preset} repeats={args.repeats} "
          f"(best-of-N wall time)")
    print(f"{'kernel':<18} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name in numba_res["times"]:
        tb = numba_res["times"][name]
        tp = numpy_res["times"][name]
        print(f"{name:<18} {tb * 1e3:>8.2f}ms {tp * 1e3:>8.2f}ms "
              f"{tp / tb:>7.2f}x")
        da, dp = numba_res["digests"][name], numpy_res["digests"][name]
        rel = abs(da - dp) / max(abs(da), abs(dp), 1e-300)
        if rel > 1e-9:
            print(f"  WARNING: paths disagree on {name} "
                  f"(rel {rel:.2e})")
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
