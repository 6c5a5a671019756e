"""Tabulate the partition bound for the sphere and for a torus with a measured second value."""

import argparse
import math

from diracspec.invariants import SphereTable, aubin_variants, sphere_value


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k-max", type=int, default=12)
    ap.add_argument("--torus-lambda2", type=float, default=math.pi)
    args = ap.parse_args()

    table = SphereTable()
    surfaces = {
        "S^2": {l: (sphere_value(l), table.is_attained(l)) for l in range(1, args.k_max + 1)},
        "T^2": {2: (args.torus_lambda2, True)},
    }
    print("# surface k plain partition restricted partition")
    for name, vals in surfaces.items():
        m_values = {0: (0.0, True), **vals}
        for k in range(1, args.k_max + 1):
            v = aubin_variants(k, m_values, sphere_table=table)
            plain, res = v["plain"], v["restricted"]
            rtxt = "nan -" if res is None else "%.12f %s" % (res.value, res.partition)
            print("%s %d %.12f %s %s" % (name, k, plain.value, plain.partition, rtxt))


if __name__ == "__main__":
    main()
