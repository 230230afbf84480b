"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel runs on inputs shaped like a branch-and-bound batch on the
desk MLP (K subdomains, 32-wide layers) and on a conv layer of the small
image network.  The first jit call (compilation) is excluded.  The last
section times one full verification query with each path, which needs a
fresh interpreter per path because the dispatch is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from certprune.kernels import jit_impl, numpy_impl


def cases(rng):
    K, n, m = 64, 32, 32
    W = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    lo = rng.normal(size=(K, n)) - 1
    hi = lo + rng.uniform(0, 2, size=(K, n))
    phase = rng.integers(-1, 2, size=(K, n)).astype(np.int8)
    lam = rng.normal(size=(K, 1, n))
    x = rng.uniform(size=(16, 8, 14, 14))
    cols = numpy_impl.im2col(x, 3, 3, 1, 1)
    return {
        "interval_affine": (W, b, lo, hi),
        "relu_phase_bounds": (lo, hi, phase),
        "crown_relu_backward": (lam, lo, hi, phase),
        "box_min": (lam, rng.normal(size=(K, 1)), lo[0], hi[0]),
        "branch_scores": (lo, hi, phase),
        "im2col": (x, 3, 3, 1, 1),
        "col2im": (cols, x.shape, 3, 3, 1, 1),
    }


def _diff(u, v):
    u, v = np.asarray(u, float), np.asarray(v, float)
    same = u == v  # also covers matching infinities
    with np.errstate(invalid="ignore"):
        return float(np.max(np.where(same, 0.0, np.abs(u - v)), initial=0.0))


def bench(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, args in cases(rng).items():
        f_np = getattr(numpy_impl, name)
        row = {"kernel": name, "numpy_us": min(timeit.repeat(lambda: f_np(*args), number=20, repeat=repeat)) / 20 * 1e6}
        if jit_impl is not None:
            f_jit = getattr(jit_impl, name)
            f_jit(*args)
            row["jit_us"] = min(timeit.repeat(lambda: f_jit(*args), number=20, repeat=repeat)) / 20 * 1e6
            a, b = f_np(*args), f_jit(*args)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            row["max_abs_diff"] = float(max(_diff(u, v) for u, v in zip(a, b)))
        rows.append(row)
    return rows


QUERY = """
import time, numpy as np
from certprune.network import build_network, mlp_arch
from certprune.verify import BaBVerifier, RobustnessQuery, VerifierConfig
from certprune.bounds import linearize
lin = linearize(build_network(mlp_arch(2, (24, 24, 24), 3, bn=False), seed=3))
x = np.random.default_rng(3).uniform(0.2, 0.8, 2); y = int(lin.forward(x[None]).argmax())
v = BaBVerifier(VerifierConfig(time_budget=1e9, max_subdomains=3000))
v.verify(RobustnessQuery(lin, x, y, 0.01))
t = time.perf_counter(); r = v.verify(RobustnessQuery(lin, x, y, 0.1, time_budget=1e9, max_subdomains=3000))
print(time.perf_counter() - t, r.status, r.subdomains)
"""


def bench_query():
    out = {}
    for label, flag in (("numpy", "1"), ("jit", "0")):
        env = dict(os.environ, CERTPRUNE_DISABLE_JIT=flag)
        res = subprocess.run([sys.executable, "-c", QUERY], env=env, capture_output=True, text=True, check=True)
        secs, status, subs = res.stdout.split()
        out[label] = {"seconds": float(secs), "status": status, "subdomains": int(subs)}
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    ap.add_argument("--skip-query", action="store_true")
    args = ap.parse_args()
    rows = bench(args.repeat)
    print(f"{'kernel':<22}{'numpy us':>12}{'jit us':>12}{'speedup':>10}{'max diff':>12}")
    for r in rows:
        jit = r.get("jit_us", float("nan"))
        print(f"{r['kernel']:<22}{r['numpy_us']:>12.1f}{jit:>12.1f}{r['numpy_us'] / jit:>10.2f}"
              f"{r.get('max_abs_diff', float('nan')):>12.2e}")
    result = {"kernels": rows}
    if not args.skip_query:
        q = bench_query()
        result["query"] = q
        for label, v in q.items():
            print(f"verify query [{label}]: {v['seconds']:.3f} s, {v['status']}, {v['subdomains']} subdomains")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1)


if __name__ == "__main__":
    main()
