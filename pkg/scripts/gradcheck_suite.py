"""Finite-difference gradient check of every layer and model over many seeds.

Prints the worst relative error per case and the wall time.
"""
import argparse
import time
from collections import defaultdict

from stochdec import gradsuite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--eps", type=float, default=1e-3)
    ap.add_argument("--stencil", type=int, choices=(3, 5), default=5)
    ap.add_argument("--tol", type=float, default=1e-4)
    args = ap.parse_args()
    t0 = time.perf_counter()
    results = gradsuite.run_suite(range(1, args.seeds + 1), eps=args.eps, stencil=args.stencil)
    worst = defaultdict(float)
    for r in results:
        worst[r.name] = max(worst[r.name], r.max_rel_error)
    for name, err in worst.items():
        print(f"{name:22s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    print(f"{len(results)} checks in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
