"""Minimize the normalized second eigenvalue on the round sphere from several random starts."""

import argparse
import math

import numpy as np

from diracspec.geometry import build_sphere_basis
from diracspec.variation import minimize, random_smooth_factor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--degree", type=int, default=6)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    basis = build_sphere_basis(args.degree)
    target = 2 * math.sqrt(math.pi)
    print("# seed status Lambda error_bar rel_err cv_beta iterations")
    for seed in args.seeds:
        beta0 = random_smooth_factor(basis, np.random.default_rng(seed))
        tr = minimize(basis, beta0, 2, seed=seed)
        v = tr.final_beta.values
        lam = tr.estimate["Lambda"]
        print("%d %s %.17g %.3g %.3g %.3g %d" % (seed, tr.status.value, lam, tr.estimate["error_bar"],
                                                 abs(lam - target) / target, v.std() / v.mean(), len(tr.iterations)))


if __name__ == "__main__":
    main()
