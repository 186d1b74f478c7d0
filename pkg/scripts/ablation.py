"""Ablation lattice at a fixed bias level: each method adds one component."""

import argparse
import logging

import numpy as np

from pldg.experiments import METHODS, run_bench, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rows = run_bench(args.out, [args.rho], args.seeds, METHODS)
    for method, by_rho in summarize(rows).items():
        v = by_rho[args.rho]
        print(f"{method:8s} ood AUC {np.mean(v):.4f} +- {np.std(v):.4f} (n={len(v)})")


if __name__ == "__main__":
    main()
