"""Named presets and the trap-set experiment runners shared by the CLI and scripts."""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from pldg.backbone import EncoderConfig
from pldg.data import ARTIFACTS, DatasetBundle, TrapSpec, generate_trap
from pldg.errors import ConfigError
from pldg.evalkit import MetricReport, plot_bias_sweep, write_metrics_csv
from pldg.objectives import Toggles
from pldg.trainer import FitResult, TrainConfig, fit, score_dataset

logger = logging.getLogger(__name__)

# one-core budget: a 48-wide, 3-block encoder keeps a full PLDG run under a minute
BENCH_ENCODER = EncoderConfig(image_size=32, patch_size=4, embed_dim=48, depth=3, num_heads=4)

TRAIN_PRESETS: dict[str, dict] = {
    "pldg-desk": dict(),
    "erm-desk": dict(toggles=Toggles.none()),
    "bench": dict(encoder=BENCH_ENCODER, M=4, epochs=15, cluster_epoch=5, lr=1e-3, batch_size=64, prompt_lr_mult=10.0),
    "vitb16": dict(
        encoder=EncoderConfig.preset("vitb16"), M=4, s=4, epochs=100, cluster_epoch=5,
        lr=5e-6, batch_size=130, weight_decay=1e-2, alpha=0.3,
    ),
}

BENCH_TRAP = dict(artifacts=ARTIFACTS, image_size=32, n_train=800, n_val=200, n_test_id=400, n_test_ood=400)
SWEEP_RHOS = (0.0, 0.3, 0.5, 0.7, 0.9, 1.0)

METHODS: dict[str, Toggles] = {
    "ERM": Toggles.none(),
    "+P": Toggles(True, False, False, False),
    "+P+A": Toggles(True, True, False, False),
    "+P+A+M": Toggles(True, True, True, False),
    "PLDG": Toggles(),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


def bench_trap(rho: float, seed: int, **overrides) -> TrapSpec:
    return TrapSpec(rho=rho, seed=seed, **{**BENCH_TRAP, **overrides})


@dataclass
class TrapRun:
    spec: TrapSpec
    config: TrainConfig
    ood_auc: float
    id_auc: float
    fit: FitResult


def run_trap(spec: TrapSpec, config: TrainConfig, run_dir: str | Path | None = None, datasets=None) -> TrapRun:
    """Train on a trap set and score both test splits; writes metrics.csv into ``run_dir``."""
    datasets = datasets if datasets is not None else generate_trap(spec)
    if config.encoder.image_size != spec.image_size:
        config = replace(config, encoder=replace(config.encoder, image_size=spec.image_size))
    result = fit(config, DatasetBundle.from_trap(datasets), run_dir=run_dir)
    metric = config.metric_name
    scores = {k: score_dataset(result.model, datasets[k], metric) for k in ("test_id", "test_ood")}
    if run_dir is not None:
        reports = [MetricReport(k, metric, scores[k], len(datasets[k]), config.seed) for k in ("test_id", "test_ood")]
        write_metrics_csv(reports, Path(run_dir) / "metrics.csv")
    return TrapRun(spec, config, scores["test_ood"], scores["test_id"], result)


BENCH_COLUMNS = ("rho", "seed", "method", "id_auc", "ood_auc")


def run_bench(
    out_dir: str | Path | None,
    rhos: Sequence[float] = (0.0, 0.5, 1.0),
    seeds: Sequence[int] = (0, 1, 2),
    methods: Mapping[str, Toggles] | None = None,
    preset: str = "bench",
    trap_overrides: Mapping | None = None,
    config_overrides: Mapping | None = None,
) -> list[dict]:
    """ERM-vs-PLDG sweep over bias levels and seeds.

    The training preset and trap layout are shared by every method; only the
    toggles differ. Writes ``bench.csv``, ``summary.csv`` and ``bias_sweep.png``.
    """
    methods = dict(methods) if methods is not None else {k: METHODS[k] for k in ("ERM", "PLDG")}
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for rho in rhos:
        for seed in seeds:
            spec = bench_trap(rho, seed, **(trap_overrides or {}))
            datasets = generate_trap(spec)
            for label, toggles in methods.items():
                config = train_preset(preset, seed=seed, toggles=toggles, **(config_overrides or {}))
                run_dir = None if out is None else out / f"rho{rho:g}" / f"seed{seed}" / _slug(label)
                run = run_trap(spec, config, run_dir, datasets)
                rows.append(dict(rho=rho, seed=seed, method=label, id_auc=run.id_auc, ood_auc=run.ood_auc))
                logger.info("rho %.2f seed %d %-8s ood %.4f id %.4f", rho, seed, label, run.ood_auc, run.id_auc)
    if out is not None:
        write_bench(rows, out)
    return rows


def _slug(label: str) -> str:
    return label.replace("+", "p_").strip("_") or "erm"


def summarize(rows: Sequence[Mapping]) -> dict[str, dict[float, list[float]]]:
    table: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        table.setdefault(r["method"], {}).setdefault(float(r["rho"]), []).append(float(r["ood_auc"]))
    return table


def write_bench(rows: Sequence[Mapping], out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([f"{r['rho']:g}", r["seed"], r["method"], f"{r['id_auc']:.6f}", f"{r['ood_auc']:.6f}"])
    table = summarize(rows)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "rho", "mean_ood_auc", "std_ood_auc", "n_seeds"])
        for method, by_rho in table.items():
            for rho in sorted(by_rho):
                v = by_rho[rho]
                w.writerow([method, f"{rho:g}", f"{np.mean(v):.6f}", f"{np.std(v):.6f}", len(v)])
    plot_bias_sweep(table, out / "bias_sweep.png")


# --------------------------------------------------------------------------
# clustering-layer and distance/weight analogs


@dataclass
class ClusterNMI:
    seed: int
    layer1_artifact: float
    layer1_class: float
    final_class: float
    layer1_stability: float  # NMI with the previous epoch's layer-1 clustering
    rows: list


def cluster_nmi_experiment(seed: int, artifact: str = "stripe_ruler", rho: float = 0.9, M: int = 2, cluster_epoch: int = 5) -> ClusterNMI:
    """Per-epoch NMI of k-means clusterings at block 1 and the last block, read at the clustering epoch."""
    spec = TrapSpec(rho=rho, artifacts=(artifact,), image_size=32, n_train=800, n_val=200, n_test_id=100, n_test_ood=100, seed=seed)
    datasets = generate_trap(spec)
    config = train_preset("bench", M=M, epochs=cluster_epoch + 1, cluster_epoch=cluster_epoch, seed=seed)
    depth = config.encoder.depth
    result = fit(config, DatasetBundle.from_trap(datasets), diagnostic_layers=[1, depth])
    at = {r["layer"]: r for r in result.diagnostics.rows if r["epoch"] == cluster_epoch}
    return ClusterNMI(
        seed, at[1]["nmi_artifact"], at[1]["nmi_class"], at[depth]["nmi_class"], at[1]["nmi_prev"], result.diagnostics.rows,
    )


DISTANCE_ARTIFACTS = ("corner_patch", "stripe_ruler", "color_tint")


def distance_weight_experiment(seed: int, out_dir: str | Path | None = None):
    """Four latent domains (clean plus three artifacts); the target carries one of them.

    The target artifact rotates with the seed. Returns the analysis report and
    the target artifact name.
    """
    from pldg.evalkit import analyze_prompt_weights, plot_distance_weights, write_distance_csv

    spec = TrapSpec(rho=0.0, artifacts=DISTANCE_ARTIFACTS, image_size=32, n_train=800, n_val=200, n_test_id=100, n_test_ood=100, seed=seed)
    datasets = generate_trap(spec)
    result = fit(train_preset("bench", M=4, seed=seed), DatasetBundle.from_trap(datasets))
    target_artifact = DISTANCE_ARTIFACTS[seed % len(DISTANCE_ARTIFACTS)]
    tspec = TrapSpec(rho=0.0, artifacts=(target_artifact,), image_size=32, n_train=20, n_val=20, n_test_id=20, n_test_ood=400, seed=100 + seed)
    ood = generate_trap(tspec)["test_ood"]
    target = ood.subset(np.flatnonzero(ood.artifact > 0))
    report = analyze_prompt_weights(result.model, datasets["train"], result.assignment, target)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_distance_csv(report, out / f"distances_seed{seed}.csv")
        plot_distance_weights(report, out / f"distances_seed{seed}.png")
    return report, target_artifact
