"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Both variants are called directly, so ADVSEP_DISABLE_NUMBA has no effect here.
Outputs are compared before timing; a mismatch aborts the run.
"""

import argparse
import time

import numpy as np

from advsep import kernels as K
from advsep._accel import HAS_NUMBA


def _best(fn, args, repeat):
    fn(*args)  # warm up (triggers compilation for numba)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    v = rng.normal(size=(2000, 784))
    pos, neg = rng.normal(size=5000), rng.normal(0.5, size=5000)
    z = rng.normal(size=(20000, 11))
    centers = np.eye(11)
    return [
        ("project_l1_rows 2000x784", K._project_l1_rows_np, K._project_l1_rows_nb, (v, 10.0)),
        ("project_l0_rows 2000x784", K._project_l0_rows_np, K._project_l0_rows_nb, (v, 20)),
        ("rank_auc 5000+5000", K._rank_auc_np, K._rank_auc_nb, (pos, neg)),
        ("center_distances 20000x11", K._center_distances_np, K._center_distances_nb, (z, centers)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb, a in cases(np.random.default_rng(args.seed)):
        if not np.allclose(f_np(*a), f_nb(*a), rtol=0, atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = _best(f_np, a, args.repeat)
        t_nb = _best(f_nb, a, args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
