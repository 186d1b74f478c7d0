"""Per-epoch NMI of shallow and deep clusterings against artifact and class labels."""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pldg.experiments import cluster_nmi_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/cluster_nmi")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--artifact", default="stripe_ruler")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(args.seeds), figsize=(4 * len(args.seeds), 3), squeeze=False)
    for ax, seed in zip(axes[0], args.seeds):
        res = cluster_nmi_experiment(seed, artifact=args.artifact)
        print(
            f"seed {seed}: L1 artifact {res.layer1_artifact:.3f}  L1 class {res.layer1_class:.3f}  "
            f"final class {res.final_class:.3f}  L1 stability {res.layer1_stability:.3f}"
        )
        with open(out / f"nmi_seed{seed}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(res.rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(res.rows)
        for layer in sorted({r["layer"] for r in res.rows}):
            rows = [r for r in res.rows if r["layer"] == layer]
            ep = [r["epoch"] for r in rows]
            ax.plot(ep, [r["nmi_artifact"] for r in rows], "-o", label=f"block {layer} vs artifact")
            ax.plot(ep, [r["nmi_class"] for r in rows], "--s", label=f"block {layer} vs class")
        ax.set_title(f"seed {seed}")
        ax.set_xlabel("epoch")
        ax.set_ylim(-0.05, 1.05)
    axes[0][0].set_ylabel("NMI")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "cluster_nmi.png", dpi=120)


if __name__ == "__main__":
    main()
