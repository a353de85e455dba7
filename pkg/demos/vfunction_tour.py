"""Empirical constants of the V-function inequalities across exponents.

Each inequality is sampled on random vector pairs plus a fixed set of
degenerate configurations, and the worst required constant is compared with
a cap computed independently by grid search and local refinement.

    python demos/vfunction_tour.py --samples 20000
"""

import argparse

from homoglab.vcalc import INEQUALITIES, ExponentParams, inequality_audit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20_000)
    ap.add_argument("--p", type=float, nargs="+", default=[1.5, 2.0, 3.0, 4.0])
    args = ap.parse_args()

    names = sorted(INEQUALITIES)
    print(f"{'inequality':>16} " + " ".join(f"{'p=' + str(p):>12}" for p in args.p))
    for name in names:
        cells = []
        for p in args.p:
            rep = inequality_audit(name, args.samples, ExponentParams(p))
            cells.append(f"{rep.empirical_constant:11.4g}{'' if rep.passed else '!'}")
        print(f"{name:>16} " + " ".join(f"{c:>12}" for c in cells))
    print("\n'!' marks an audit whose constant exceeded its cap.")


if __name__ == "__main__":
    main()
