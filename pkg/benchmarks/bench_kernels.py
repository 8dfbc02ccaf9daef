"""Time the hot kernels under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel runs once per backend to warm up (numba compiles then), and the
median of the following runs is reported together with the speedup.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from clusterhom import _accel
from clusterhom.cluster import label_components
from clusterhom.coefficients import build_degenerate_field, quadratic_spec
from clusterhom.diffusion import Control, sample_cluster_points, simulate_ensemble
from clusterhom.environment import BoxDomain, condition_on_origin
from clusterhom.hjb import Grid, solve_hjb_fd


def _median_time(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def build_cases(quick: bool) -> dict:
    scale = 0.5 if quick else 1.0
    _, graph = condition_on_origin(4.0, BoxDomain(2, 12.0), seed=3)
    fld = build_degenerate_field(graph, smoothing_radius=0.25)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-40, 40, size=(int(20_000 * scale), 2))
    probes = rng.uniform(-12, 12, size=(int(100_000 * scale), 2))
    x0 = sample_cluster_points(fld, 4.0, 1, seed=1)[0]
    spec = quadratic_spec([0.2, 0.0])
    grid = Grid.build(fld, 0.5, 1.0, 1 / 32)
    n_paths = int(500 * scale)

    return {
        "cluster labeling": lambda: label_components(pts),
        "coefficient profile": lambda: fld.profile(probes),
        "SDE ensemble": lambda: simulate_ensemble(fld, Control.zero(), x0, 5.0, 0.01, n_paths, seed=2),
        "HJB march": lambda: solve_hjb_fd(fld, spec, lambda X: X[:, 0], 0.5, 0.25, grid),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="halve the problem sizes")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    cases = build_cases(args.quick)
    old = _accel.backend()
    print(f"{'kernel':<22}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    try:
        for name, fn in cases.items():
            res = {}
            for b in ("numba", "numpy"):
                _accel.set_backend(b)
                res[b] = _median_time(fn, args.repeat)
            print(f"{name:<22}{res['numba']:>12.4f}{res['numpy']:>12.4f}{res['numpy'] / res['numba']:>9.1f}x")
    finally:
        _accel.set_backend(old)


if __name__ == "__main__":
    main()
