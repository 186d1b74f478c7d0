"""Frechet distance from each pseudo-domain to a target domain, next to the mean prompt weight."""

import argparse

from pldg.experiments import distance_weight_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/distance_weights")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    for seed in args.seeds:
        rep, target = distance_weight_experiment(seed, args.out)
        pairs = ", ".join(f"d{m}: FD {fd:.3f} w {w:.3f}" for m, fd, w in zip(rep.domains, rep.frechet, rep.mean_weight))
        print(f"seed {seed} target={target} spearman={rep.spearman:+.2f} | {pairs}")


if __name__ == "__main__":
    main()
