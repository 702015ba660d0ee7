"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

CLE is timed on random score matrices (dense, so greedy heads usually
contain cycles); top-k on a block of query-by-support similarities of the
size the explain index and hubness scans use.
"""

import argparse
import json
import platform
import time

import numpy as np

from edgekit import _kernels_py as py

try:
    from edgekit import _ckernels as cy
except ImportError:
    cy = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cle_case(T, n_mats, seed=0):
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(n_mats):
        S = rng.normal(size=(T + 1, T + 1))
        np.fill_diagonal(S, -np.inf)
        mats.append(S)
    return mats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = {"python": py}
    if cy is not None:
        backends["cython"] = cy
    else:
        print("compiled extension not built; timing the fallback only")

    rows = []
    for T, n in ((10, 200), (30, 100), (60, 40), (120, 10)):
        mats = cle_case(T, n)
        ref = [py.cle_decode(S) for S in mats]
        for name, be in backends.items():
            assert all(np.array_equal(be.cle_decode(S), r) for S, r in zip(mats, ref))
            sec = best_of(lambda: [be.cle_decode(S) for S in mats], args.repeat)
            rows.append({"kernel": "cle_decode", "case": f"T={T} x{n}", "backend": name,
                         "ms_per_call": 1e3 * sec / n})

    rng = np.random.default_rng(1)
    for q, e, k in ((256, 25_000, 10), (1024, 25_000, 10), (64, 200_000, 10), (1024, 25_000, 1)):
        sims = rng.normal(size=(q, e))
        ref = py.topk_indices(sims, k)
        for name, be in backends.items():
            assert np.array_equal(be.topk_indices(sims, k), ref)
            sec = best_of(lambda: be.topk_indices(sims, k), args.repeat)
            rows.append({"kernel": "topk_indices", "case": f"{q}x{e} k={k}", "backend": name,
                         "ms_per_call": 1e3 * sec})

    print(f"{'kernel':<14}{'case':<22}{'backend':<9}{'ms/call':>12}{'speedup':>9}")
    base = {}
    for r in rows:
        key = (r["kernel"], r["case"])
        if r["backend"] == "python":
            base[key] = r["ms_per_call"]
        r["speedup"] = base[key] / r["ms_per_call"]
        print(f"{r['kernel']:<14}{r['case']:<22}{r['backend']:<9}{r['ms_per_call']:>12.3f}{r['speedup']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"machine": platform.platform(), "python": platform.python_version(), "rows": rows}, fh,
                      indent=2)


if __name__ == "__main__":
    main()
