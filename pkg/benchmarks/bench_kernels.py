#!/usr/bin/env python3
"""Benchmark the retrieval kernels under the JIT and pure-numpy paths.

Times the public kernels with FASSL_NUMBA=1 (this process) and FASSL_NUMBA=0
(a spawned child, since the path is fixed at import time), prints a table,
and verifies both paths agree. Run as:

    python3 benchmarks/bench_kernels.py

Expected picture: the top-k scan gains roughly 20x from numba while pairwise
cosine is BLAS-bound and identical on both paths (that measurement is why
only the scan carries a JIT kernel).
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np

SIZES = [(200, 100, 16), (1000, 400, 32), (4000, 1000, 64)]  # (n_train, n_test, dim)
REPEATS = 5


def time_kernels() -> dict:
    from fassl import kernels

    results = {"using_numba": kernels.USING_NUMBA, "cases": []}
    rng = np.random.default_rng(0)
    for n, q, d in SIZES:
        train = rng.normal(size=(n, d))
        test = rng.normal(size=(q, d))
        train_labels = rng.integers(0, 10, size=n)
        test_labels = rng.integers(0, 10, size=q)
        # warm-up (includes JIT compilation on the numba path)
        sims = kernels.pairwise_cosine(test, train)
        hits = kernels.topk_hits(1.0 - sims, train_labels, test_labels, 5)
        t0 = time.perf_counter()
        for _ in range(REPEATS):
            sims = kernels.pairwise_cosine(test, train)
        t_cos = (time.perf_counter() - t0) / REPEATS
        dist = 1.0 - sims
        t0 = time.perf_counter()
        for _ in range(REPEATS):
            hits = kernels.topk_hits(dist, train_labels, test_labels, 5)
        t_knn = (time.perf_counter() - t0) / REPEATS
        results["cases"].append(
            {
                "size": [n, q, d],
                "pairwise_cosine_s": t_cos,
                "topk_hits_s": t_knn,
                "hit_total": int(hits.sum()),
                "sims_checksum": float(sims.sum()),
            }
        )
    return results


def main() -> int:
    if os.environ.get("_FASSL_BENCH_CHILD") == "1":
        json.dump(time_kernels(), sys.stdout)
        return 0

    here = time_kernels()
    env = dict(os.environ, FASSL_NUMBA="0", _FASSL_BENCH_CHILD="1")
    child = subprocess.run(
        [sys.executable, os.path.abspath(__file__)], env=env, capture_output=True, text=True, check=True
    )
    fallback = json.loads(child.stdout)

    if not here["using_numba"]:
        print("numba unavailable; both paths are pure numpy")
    label_a = "numba[s]" if here["using_numba"] else "numpy[s]"
    print(f"{'size (n,q,d)':>18s} {'kernel':>16s} {label_a:>10s} {'numpy[s]':>10s} {'speedup':>8s}")
    ok = True
    for a, b in zip(here["cases"], fallback["cases"]):
        n, q, d = a["size"]
        for key, label in (("pairwise_cosine_s", "pairwise_cosine"), ("topk_hits_s", "topk_hits")):
            speed = b[key] / a[key] if a[key] > 0 else float("inf")
            print(f"{f'{n}x{q}x{d}':>18s} {label:>16s} {a[key]:>10.5f} {b[key]:>10.5f} {speed:>7.1f}x")
        if a["hit_total"] != b["hit_total"] or a["sims_checksum"] != b["sims_checksum"]:
            ok = False
            print(f"  MISMATCH between paths at {n}x{q}x{d}: {a} vs {b}")
    print("paths agree exactly" if ok else "PATHS DISAGREE")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
