"""ERM vs PLDG over bias levels on the trap set; writes bench.csv, summary.csv and bias_sweep.png."""

import argparse
import logging

from pldg.experiments import METHODS, SWEEP_RHOS, run_bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.add_argument("--full-sweep", action="store_true", help=f"use rho in {SWEEP_RHOS}")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--methods", nargs="+", default=["ERM", "PLDG"], choices=list(METHODS))
    p.add_argument("--preset", default="bench")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rhos = SWEEP_RHOS if args.full_sweep else args.rhos
    rows = run_bench(args.out, rhos, args.seeds, {m: METHODS[m] for m in args.methods}, preset=args.preset)
    for r in rows:
        print(f"rho={r['rho']:g} seed={r['seed']} {r['method']:8s} ood={r['ood_auc']:.4f} id={r['id_auc']:.4f}")


if __name__ == "__main__":
    main()
