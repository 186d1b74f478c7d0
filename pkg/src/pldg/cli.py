"""``pldg`` command line: synth, train, cluster, eval, analyze, inspect, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Relative output paths resolve under ``$PLDG_RUN_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock, Timeout

from pldg.data import DatasetBundle, TrapSpec, generate_trap, load_trap, save_trap
from pldg.errors import ConfigError, DataError, LoadError
from pldg.evalkit import (
    MetricReport,
    analyze_prompt_weights,
    plot_distance_weights,
    write_distance_csv,
    write_metrics_csv,
)
from pldg.experiments import METHODS, SWEEP_RHOS, TRAIN_PRESETS, run_bench, train_preset
from pldg.objectives import Toggles
from pldg.trainer import TrainConfig, fit, load_model, predict_dataset, score_dataset

logger = logging.getLogger("pldg")

RUN_ROOT_ENV = "PLDG_RUN_ROOT"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def resolve_out(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _prepare(path: Path, force: bool, is_dir: bool = True):
    if path.exists() and (not is_dir or any(path.iterdir())):
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if is_dir:
            shutil.rmtree(path)
        else:
            path.unlink()
    (path if is_dir else path.parent).mkdir(parents=True, exist_ok=True)


@contextmanager
def _locked(target: Path):
    lock_path = target.parent / f".{target.name}.lock"
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(lock_path), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise RuntimeError(f"{target} is locked by another process") from None
    try:
        yield
    finally:
        lock.release()


def _coerce(value: str):
    v = yaml.safe_load(value)
    if isinstance(v, str):
        # YAML 1.1 reads forms like 1e-3 as strings
        try:
            return float(v)
        except ValueError:
            pass
    return v


def apply_overrides(base: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override key {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = _coerce(raw)
    return out


def resolve_train_config(args) -> TrainConfig:
    cfg = train_preset(args.preset) if args.preset else TrainConfig()
    d = cfg.to_dict()
    if args.config:
        with open(args.config) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        enc = loaded.pop("encoder", None)
        unknown = set(loaded) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        if isinstance(enc, str):
            from pldg.backbone import EncoderConfig

            enc = asdict(EncoderConfig.preset(enc))
        if enc is not None:
            d["encoder"] = {**d["encoder"], **enc}
        d.update(loaded)
    d = apply_overrides(d, args.override or [])
    if args.toggles is not None:
        d["toggles"] = asdict(Toggles.parse(args.toggles))
    if args.seed is not None:
        d["seed"] = args.seed
    if isinstance(d.get("toggles"), dict):
        d["toggles"] = Toggles(**d["toggles"])
    return TrainConfig.from_dict(d)


def _load_split(data_dir: str, split: str):
    splits = load_trap(data_dir)
    if split not in splits:
        raise ConfigError(f"split {split!r} not in {sorted(splits)}")
    return splits, splits[split]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    base = {}
    if args.spec:
        with open(args.spec) as f:
            base = TrapSpec.from_dict(yaml.safe_load(f) or {}).to_dict()
    for key in ("seed", "image_size", "n_train", "n_val", "n_test_id", "n_test_ood"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.artifacts:
        base["artifacts"] = tuple(args.artifacts.split(","))
    out = resolve_out(args.out)
    rhos = SWEEP_RHOS if args.sweep else [args.rho if args.rho is not None else base.get("rho", 1.0)]
    targets = []
    for rho in rhos:
        spec = TrapSpec.from_dict({**base, "rho": rho})
        targets.append((spec, out / f"rho{rho:g}" if args.sweep else out))
    # generate everything first so an invalid bias level writes nothing
    generated = [(spec, target, generate_trap(spec)) for spec, target in targets]
    with _locked(out):
        for spec, target, datasets in generated:
            _prepare(target, args.force)
            save_trap(datasets, spec, target)
            print(f"wrote {target}")
    return 0


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    out = resolve_out(args.out)
    splits = load_trap(args.data)
    if config.encoder.image_size != splits["train"].image_size:
        raise ConfigError(
            f"encoder.image_size={config.encoder.image_size} but data has {splits['train'].image_size}px images"
        )
    resolved = yaml.safe_dump(config.to_dict(), sort_keys=False)
    print(resolved, end="")
    layers = [int(v) for v in args.diagnostic_layers.split(",")] if args.diagnostic_layers else None
    with _locked(out):
        _prepare(out, args.force)
        (out / "config.yaml").write_text(resolved)
        result = fit(config, DatasetBundle.from_trap(splits), run_dir=out, diagnostic_layers=layers)
    print(f"selected epoch {result.history.selected_epoch}; val {config.metric_name} {result.history.best_metric:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, config, _ = load_model(args.checkpoint)
    _, ds = _load_split(args.data, args.split)
    out = resolve_out(args.out)
    metric = args.metric or config.metric_name
    value = score_dataset(model, ds, metric)
    with _locked(out):
        _prepare(out, args.force, is_dir=False)
        write_metrics_csv([MetricReport(args.split, metric, value, len(ds), config.seed)], out)
    print(f"{args.split} {metric} {value:.4f}")
    return 0


def cmd_analyze(args) -> int:
    model, _, assignment = load_model(args.checkpoint)
    if model.adapter is None or model.generator is None:
        print("error: adapter not present in this checkpoint; analysis needs a run with prompts and adapter", file=sys.stderr)
        return 2
    splits, target = _load_split(args.data, args.split)
    report = analyze_prompt_weights(model, splits["train"], assignment, target)
    out = resolve_out(args.out)
    with _locked(out):
        _prepare(out, args.force, is_dir=False)
        write_distance_csv(report, out)
        if args.plot:
            plot_distance_weights(report, out.with_suffix(".png"))
    rho = "n/a" if report.spearman is None else f"{report.spearman:.3f}"
    print(f"spearman {rho}; argmax weight {report.argmax_weight}; argmin distance {report.argmin_distance}")
    return 0


def cmd_inspect(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    if model.adapter is None:
        print("error: adapter not present in this checkpoint", file=sys.stderr)
        return 2
    _, ds = _load_split(args.data, args.split)
    _, w = predict_dataset(model, ds)
    out = resolve_out(args.out)
    with _locked(out):
        _prepare(out, args.force, is_dir=False)
        with open(out, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["domain", "weight_mean", "weight_std"])
            for m in range(w.shape[1]):
                wr.writerow([m, f"{w[:, m].mean():.6f}", f"{w[:, m].std():.6f}"])
    print(f"wrote {out}")
    return 0


def cmd_cluster(args) -> int:
    from pldg.discovery import ClusteringDiagnostics

    model, config, _ = load_model(args.checkpoint)
    _, ds = _load_split(args.data, args.split)
    layers = [int(v) for v in args.layers.split(",")]
    diag = ClusteringDiagnostics(layers, args.M or config.M, config.seed)
    rows = diag.update(model.encoder, ds, epoch=0)
    out = resolve_out(args.out)
    with _locked(out):
        _prepare(out, args.force, is_dir=False)
        diag.to_csv(out)
    for r in rows:
        print(f"layer {r['layer']}: nmi_class {r['nmi_class']:.3f}" + (f" nmi_artifact {r['nmi_artifact']:.3f}" if "nmi_artifact" in r else ""))
    return 0


def cmd_bench(args) -> int:
    out = resolve_out(args.out)
    rhos = [float(v) for v in args.rhos.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    labels = args.methods.split(",")
    unknown = set(labels) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {sorted(METHODS)}")
    with _locked(out):
        _prepare(out, args.force)
        rows = run_bench(out, rhos, seeds, {k: METHODS[k] for k in labels}, preset=args.preset)
    by = {}
    for r in rows:
        by.setdefault((r["method"], r["rho"]), []).append(r["ood_auc"])
    print("method    rho   mean_ood_auc")
    for (m, rho), v in by.items():
        print(f"{m:<9} {rho:<5g} {np.mean(v):.4f}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pldg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic trap set")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="YAML TrapSpec file")
    s.add_argument("--rho", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--artifacts", help="comma-separated artifact names")
    s.add_argument("--image-size", dest="image_size", type=int)
    for split in ("train", "val", "test_id", "test_ood"):
        s.add_argument(f"--n-{split.replace('_', '-')}", dest=f"n_{split}", type=int)
    s.add_argument("--sweep", action="store_true", help="emit rho in {0, .3, .5, .7, .9, 1} as sibling directories")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="YAML file with TrainConfig keys")
    t.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    t.add_argument("--toggles", help="'none' or a subset like P+A+M+G")
    t.add_argument("--toggles.none", dest="toggles", action="store_const", const="none", help="shorthand for --toggles none")
    t.add_argument("--seed", type=int)
    t.add_argument("-o", "--override", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
    t.add_argument("--diagnostic-layers", help="comma-separated blocks for per-epoch NMI diagnostics")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (
        ("eval", cmd_eval, "score a checkpoint on a split"),
        ("analyze", cmd_analyze, "domain distance vs prompt weight report"),
        ("inspect", cmd_inspect, "per-domain adapter weight statistics"),
        ("cluster", cmd_cluster, "NMI diagnostics of k-means on class tokens"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--split", default="test_ood" if name != "cluster" else "train")
        c.add_argument("--out", required=True)
        c.add_argument("--force", action="store_true")
        if name == "eval":
            c.add_argument("--metric", choices=["roc_auc", "accuracy"])
        if name == "analyze":
            c.add_argument("--plot", action="store_true")
        if name == "cluster":
            c.add_argument("--layers", default="1")
            c.add_argument("--M", type=int)
        c.set_defaults(func=fn)

    b = sub.add_parser("bench", help="ERM vs PLDG sweep over bias levels and seeds")
    b.add_argument("--out", required=True)
    b.add_argument("--rhos", default="0,0.5,1")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--methods", default="ERM,PLDG", help=f"comma-separated subset of {','.join(METHODS)}")
    b.add_argument("--preset", default="bench", choices=sorted(TRAIN_PRESETS))
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, LoadError, RuntimeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
