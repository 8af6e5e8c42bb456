"""Time the numba and numpy paths of every kernel in ``dcid.kernels``.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are called directly, so the ``DCID_DISABLE_NUMBA`` flag does not
matter here. The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from dcid import kernels
from dcid._accel import HAVE_NUMBA


def cases(rng):
    img = rng.random((512, 512, 3))
    ys, xs = np.mgrid[0:512, 0:512].astype(np.float64)
    th = np.deg2rad(3.0)
    u = np.cos(th) * xs - np.sin(th) * ys + 7.3
    v = np.sin(th) * xs + np.cos(th) * ys - 4.1
    yield "bilinear_sample 512x512x3", kernels._bilinear_sample_numba, kernels._bilinear_sample_numpy, (img, u, v)

    pts = rng.random((4000, 2)) * 512
    yield ("greedy_nms 4000 pts", kernels._greedy_nms_numba, kernels._greedy_nms_numpy,
           (pts[:, 0].copy(), pts[:, 1].copy(), 4.0, 256))

    src = rng.random((300, 2)) * 256
    dst = src + rng.normal(0, 1, src.shape)
    hs = np.tile(np.eye(3), (1000, 1, 1)) + rng.normal(0, 1e-3, (1000, 3, 3))
    yield "ransac_scores 1000 x 300", kernels._ransac_scores_numba, kernels._ransac_scores_numpy, (hs, src, dst, 3.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, fast, slow, a in cases(rng):
        t_np = min(timeit.repeat(lambda: slow(*a), number=1, repeat=args.repeat)) * 1e3
        if HAVE_NUMBA:
            fast(*a)
            t_nb = min(timeit.repeat(lambda: fast(*a), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<28}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<28}{t_np:>12.2f}{'n/a':>12}{'':>10}")


if __name__ == "__main__":
    main()
