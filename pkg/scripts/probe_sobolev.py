"""Probe the L^{4/3} spinor inequality on random spinors and report the calibrated constant."""

import argparse

from diracspec.geometry import build_sphere_basis
from diracspec.invariants import SOBOLEV_K2, sobolev_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--degree", type=int, default=6)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.01, 0.001])
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    basis = build_sphere_basis(args.degree)
    print("# K = %.12f" % SOBOLEV_K2)
    print("# eps seed B_eps violations max_ratio")
    for eps in args.eps:
        for seed in args.seeds:
            r = sobolev_probe(basis, eps, args.samples, seed)
            print("%g %d %.6g %d %.12f" % (eps, seed, r.b_eps, r.violations, r.max_ratio))


if __name__ == "__main__":
    main()
