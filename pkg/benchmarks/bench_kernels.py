"""Benchmark the numba kernels against the pure-numpy fallback.

Times the B-spline basis/derivative evaluation (the package's innermost
hot loop) and a representative curve-update workload on both paths.

Usage: python benchmarks/bench_kernels.py [--points 200000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from distkm._kernels import (
    HAS_NUMBA,
    _basis_deriv_matrix_np,
    _basis_matrix_np,
)


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(n_points, repeat):
    t_max = 30.0
    interior = np.sort(np.random.default_rng(1).uniform(1.0, 29.0, 9))
    full = np.concatenate([np.zeros(4), interior, np.full(4, t_max)])
    x = np.sort(np.random.default_rng(2).uniform(0.0, t_max, n_points))

    rows = []
    rows.append(
        (
            "basis_matrix",
            timeit(lambda: _basis_matrix_np(x, full, 3), repeat),
            None,
        )
    )
    rows.append(
        (
            "basis_deriv_matrix",
            timeit(lambda: _basis_deriv_matrix_np(x, full, 3), repeat),
            None,
        )
    )
    if HAS_NUMBA:
        from distkm._kernels import _basis_deriv_matrix_nb, _basis_matrix_nb

        _basis_matrix_nb(x[:8], full, 3)  # trigger compilation outside timing
        _basis_deriv_matrix_nb(x[:8], full, 3)
        rows[0] = (
            "basis_matrix",
            rows[0][1],
            timeit(lambda: _basis_matrix_nb(x, full, 3), repeat),
        )
        rows[1] = (
            "basis_deriv_matrix",
            rows[1][1],
            timeit(lambda: _basis_deriv_matrix_nb(x, full, 3), repeat),
        )
    return rows


def bench_update(repeat):
    """One site of curve updates, the dominant end-to-end workload."""
    from distkm.federation import FederationConfig, Site, SiteDataset
    from distkm.surv_core import SurvivalRecord

    rng = np.random.default_rng(3)
    t_true = rng.exponential(15.0, 500)
    c = rng.exponential(35.0, 500)
    x = np.minimum(t_true, c)
    delta = (t_true <= c).astype(int)
    records = [SurvivalRecord(float(x[i]), int(delta[i])) for i in range(500)]
    cfg = FederationConfig(
        mode="unweighted", eval_times=(5.0, 10.0), t_max=float(np.quantile(x, 0.99))
    )
    sites = [
        SiteDataset(site_id="a", records=tuple(records[:250])),
        SiteDataset(site_id="b", records=tuple(records[250:])),
    ]
    objs = [Site(s) for s in sites]
    blob = objs[0].initialize_curves(cfg)

    return timeit(lambda: objs[1].update_curves(blob, cfg), repeat)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--points", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available and enabled: {HAS_NUMBA}")
    print(f"evaluation points: {args.points}\n")
    rows = bench_kernels(args.points, args.repeat)
    print(f"{'kernel':24s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, t_np, t_nb in rows:
        if t_nb is None:
            print(f"{name:24s} {t_np * 1e3:10.2f}ms {'n/a':>12s}")
        else:
            print(f"{name:24s} {t_np * 1e3:10.2f}ms {t_nb * 1e3:10.2f}ms {t_np / t_nb:8.1f}x")

    path = "numba" if HAS_NUMBA else "numpy fallback"
    t_site = bench_update(max(2, args.repeat // 2))
    print(f"\n250-record site update ({path} path): {t_site:.2f}s")
    if HAS_NUMBA:
        print("rerun with DISTKM_DISABLE_NUMBA=1 to time the numpy fallback end to end")


if __name__ == "__main__":
    main()
