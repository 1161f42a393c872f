"""Throughput and accuracy of the voxelwise classical fit.

    python3 scripts/fit_benchmark.py --voxels 1000 10000 100000
"""
import argparse
import time

import numpy as np
import torch

from jointivim.classical import fit_voxels
from jointivim.model import DEFAULT_BOUNDS, DEFAULT_BVALUES, signal_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--voxels", type=int, nargs="+", default=[1000, 10000, 96 * 96])
    ap.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma (S0 = 1)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    rng = np.random.default_rng(args.seed)
    b = np.asarray(DEFAULT_BVALUES)
    lo, hi = DEFAULT_BOUNDS.lower(), DEFAULT_BOUNDS.upper()
    print(f"{'voxels':>8}{'seconds':>10}{'vox/s':>12}{'max rel D':>12}{'max rel f':>12}{'med rel D*':>12}")
    for n in args.voxels:
        theta = rng.uniform(lo, hi, (n, 3))
        S = signal_model(b, 1.0, theta[:, 1:2], theta[:, 0:1], theta[:, 2:3])
        if args.noise:
            S = np.abs(S + rng.normal(0, args.noise, S.shape))
        t0 = time.perf_counter()
        res = fit_voxels(S, b)
        dt = time.perf_counter() - t0
        est = np.stack([res.params.D, res.params.f, res.params.Dstar], -1)
        rel = np.abs(est - theta) / theta
        print(f"{n:8d}{dt:10.3f}{n / dt:12.0f}{rel[:, 0].max():12.2e}{rel[:, 1].max():12.2e}"
              f"{np.median(rel[:, 2]):12.2e}")


if __name__ == "__main__":
    main()
