"""Compare the compiled and pure-Python MWLS stencil kernels.

Usage::

    python benchmarks/bench_mwls.py [--points 1215] [--nb 35] [--repeat 5]

Builds stencils for a jittered mesh of the requested size (about the size of
one trajectory-engine step) with each backend, reports the best wall time of
``--repeat`` runs, and checks that both backends produce the same operators.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from qhydro import mwls


def _cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n)))
    g = np.stack(np.meshgrid(np.arange(side), np.arange(side)), -1).reshape(-1, 2)[:n].astype(float)
    return g + 0.2 * rng.uniform(-1, 1, g.shape)


def _time_build(backend, pos, cfg, repeat, threads):
    mwls.use_backend(backend)
    mwls.set_threads(threads)
    cloud = mwls.PointCloud(pos)
    best, st = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        st = mwls.Stencils.at_points(cloud, cfg)
        best = min(best, time.perf_counter() - t0)
    return best, st


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=1215)
    ap.add_argument("--nb", type=int, default=35)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    pos = _cloud(args.points)
    cfg = mwls.MwlsConfig(n_b=args.nb, weight_scale=0.3)
    start = mwls.backend()
    try:
        t_py, st_py = _time_build("python", pos, cfg, args.repeat, 1)
        print(f"python    : {t_py * 1e3:9.2f} ms  ({args.points} stencils, n_b={args.nb})")
        try:
            t_c, st_c = _time_build("compiled", pos, cfg, args.repeat, args.threads)
        except RuntimeError as exc:
            print(f"compiled  : unavailable ({exc})")
            return
        print(f"compiled  : {t_c * 1e3:9.2f} ms  (threads={args.threads})")
        print(f"speed-up  : {t_py / t_c:9.1f}x")
        f = np.sin(pos[:, 0]) * np.cos(pos[:, 1])
        diff = np.max(np.abs(st_py.coefficients(f) - st_c.coefficients(f)))
        print(f"max |coefficient difference| = {diff:.3e}")
    finally:
        mwls.use_backend(start)


if __name__ == "__main__":
    main()
