"""Two-phase training: ERM warmup, one-time clustering, then prompt training.

Epochs are numbered from 1. For a prompt-enabled run the first
``cluster_epoch`` epochs are plain ERM; right after epoch ``cluster_epoch``
the warmup model's layer-``cluster_layer`` class tokens are clustered once
into M pseudo-domains, the assignment is frozen and written to disk, and
every later epoch optimises the total loss. Model selection and early
stopping only consider post-clustering epochs of prompt-enabled runs.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from pldg.backbone import EncoderConfig, ViTEncoder, load_checkpoint, save_checkpoint
from pldg.data import DatasetBundle, ImageDataset
from pldg.discovery import (
    ClusteringDiagnostics,
    PseudoDomainAssignment,
    assign_pseudo_domains,
    cluster_style_features,
    collect_style_features,
)
from pldg.errors import ConfigError, LoadError, TrainingError
from pldg.evalkit import accuracy, roc_auc
from pldg.objectives import LossBreakdown, Toggles, compute_step_loss
from pldg.prompts import Adapter, PromptGenerator, uniform_weights, weighted_prompt

logger = logging.getLogger(__name__)

SELECTION_RULES = ("train-domain-val", "ood-val")


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    M: int = 4
    s: int = 4
    cluster_layer: int = 1
    cluster_epoch: int = 5
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 1e-2
    alpha: float = 0.3
    lambda_w: float = 1.0
    patience: int = 22
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    selection: str = "train-domain-val"
    augment: bool = True
    normalize_features: bool = True
    per_class_clustering: bool = False
    kmeans_restarts: int = 10
    double_norm: bool = True
    prompt_lr_mult: float = 1.0
    freeze_backbone: bool = False
    metric: str = "auto"

    def __post_init__(self):
        if isinstance(self.encoder, Mapping):
            object.__setattr__(self, "encoder", EncoderConfig.from_dict(self.encoder))
        if isinstance(self.toggles, str):
            object.__setattr__(self, "toggles", Toggles.parse(self.toggles))
        elif isinstance(self.toggles, Mapping):
            object.__setattr__(self, "toggles", Toggles(**self.toggles))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.toggles.P and not 1 <= self.cluster_epoch < self.epochs:
            raise ConfigError(f"cluster_epoch must satisfy 1 <= cluster_epoch < epochs, got {self.cluster_epoch}/{self.epochs}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.M < 1 or self.s < 0:
            raise ConfigError("M must be >= 1 and s >= 0")
        if not 1 <= self.cluster_layer <= self.encoder.depth:
            raise ConfigError(f"cluster_layer must lie in [1, {self.encoder.depth}]")
        if self.selection not in SELECTION_RULES:
            raise ConfigError(f"selection must be one of {SELECTION_RULES}")
        if self.metric not in ("auto", "roc_auc", "accuracy"):
            raise ConfigError("metric must be auto, roc_auc or accuracy")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")

    @property
    def metric_name(self) -> str:
        if self.metric != "auto":
            return self.metric
        return "roc_auc" if self.encoder.num_classes == 2 else "accuracy"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toggles"] = asdict(self.toggles)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))


class PLDGModel(nn.Module):
    """Encoder with optional prompt generator and adapter."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        t = config.toggles
        self.encoder = ViTEncoder(config.encoder)
        d = config.encoder.embed_dim
        self.generator = PromptGenerator(config.M, config.s, d, factorized=t.G) if t.P else None
        self.adapter = Adapter(d, config.M) if t.A else None

    def prompt_weights(self, cls: torch.Tensor) -> torch.Tensor:
        if self.adapter is not None:
            return self.adapter(cls)
        return uniform_weights(cls.shape[0], self.config.M, cls.dtype)

    def predict_logits(self, images: torch.Tensor, prompted: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Deployment path: plain forward, adapter weights, weighted prompt, prompted forward."""
        cls, logits = self.encoder.forward_plain(images)
        if self.generator is None or not prompted:
            return logits, None
        w = self.prompt_weights(cls)
        _, logits = self.encoder.forward_prompted(images, weighted_prompt(self.generator.all_prompts(), w))
        return logits, w


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_metric: float
    selected: bool = False


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None
    assignment_path: str | None = None
    diagnostics_path: str | None = None
    steps: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_metric(self) -> float:
        return next(r.val_metric for r in self.records if r.epoch == self.selected_epoch)

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_metric", "selected"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_metric:.6f}", int(r.epoch == self.selected_epoch)])

    def steps_to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "epoch", "loss_total", "loss_mixup", "loss_weighted_ce", "loss_weight_sup"])
            for s in self.steps:
                w.writerow([s["step"], s["epoch"], *(f"{s[k]:.8f}" for k in ("total", "mixup", "weighted_ce", "weight_sup"))])


@dataclass
class FitResult:
    model: PLDGModel
    history: TrainingHistory
    assignment: PseudoDomainAssignment | None
    checkpoint: Path | None = None
    diagnostics: ClusteringDiagnostics | None = None


# --------------------------------------------------------------------------
# augmentation


def augment_batch(x: torch.Tensor, gen: torch.Generator, pad: int = 2) -> torch.Tensor:
    """Random flips, 90-degree rotations, shift-crops and brightness/contrast jitter."""
    B = x.shape[0]
    flip = torch.rand(B, generator=gen) < 0.5
    x = torch.where(flip.view(B, 1, 1, 1), x.flip(-1), x)
    k = int(torch.randint(4, (1,), generator=gen))
    x = torch.rot90(x, k, dims=(-2, -1))
    if pad:
        H = x.shape[-1]
        padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
        dy, dx = (int(v) for v in torch.randint(2 * pad + 1, (2,), generator=gen))
        x = padded[..., dy : dy + H, dx : dx + H]
    bright = (torch.rand(B, 1, 1, 1, generator=gen) - 0.5) * 0.2
    contrast = 1.0 + (torch.rand(B, 1, 1, 1, generator=gen) - 0.5) * 0.2
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return ((x - mean) * contrast + mean + bright).clamp(0.0, 1.0)


# --------------------------------------------------------------------------
# evaluation helpers


@torch.no_grad()
def predict_dataset(model: PLDGModel, dataset: ImageDataset, batch_size: int = 256, prompted: bool = True):
    """Softmax scores (n x C) and prompt weights (n x M or None)."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    images = dataset.chw()
    scores, weights = [], []
    try:
        for start in range(0, len(dataset), batch_size):
            x = torch.from_numpy(images[start : start + batch_size]).to(dtype)
            logits, w = model.predict_logits(x, prompted)
            scores.append(logits.softmax(-1).double().numpy())
            if w is not None:
                weights.append(w.double().numpy())
    finally:
        model.train(was)
    return np.concatenate(scores), (np.concatenate(weights) if weights else None)


def score_dataset(model: PLDGModel, dataset: ImageDataset, metric: str, prompted: bool = True) -> float:
    scores, _ = predict_dataset(model, dataset, prompted=prompted)
    if metric == "roc_auc":
        return roc_auc(scores, dataset.labels)
    return accuracy(scores.argmax(1), dataset.labels)


def predict(checkpoint, images) -> tuple[np.ndarray, np.ndarray | None]:
    """Scores and prompt weights for raw images (N x 3 x H x W) from a checkpoint path or model."""
    model = checkpoint if isinstance(checkpoint, PLDGModel) else load_model(checkpoint)[0]
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    if x.shape[1:] != (3, model.config.encoder.image_size, model.config.encoder.image_size):
        raise LoadError(f"images of shape {tuple(x.shape)} do not match the checkpoint encoder config")
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, w = model.predict_logits(x)
    finally:
        model.train(was)
    return logits.softmax(-1).double().numpy(), (None if w is None else w.double().numpy())


# --------------------------------------------------------------------------
# training


def _build_optimizer(model: PLDGModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.freeze_backbone:
        model.encoder.set_backbone_trainable(False)
    enc = [p for p in model.encoder.parameters() if p.requires_grad]
    extra = [p for m in (model.generator, model.adapter) if m is not None for p in m.parameters()]
    groups = [{"params": enc}]
    if extra:
        groups.append({"params": extra, "lr": config.lr * config.prompt_lr_mult})
    return torch.optim.AdamW(groups, lr=config.lr, weight_decay=config.weight_decay)


def warmup_epoch(
    model: PLDGModel,
    data: ImageDataset,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    rng: np.random.Generator,
    aug_gen: torch.Generator | None,
    epoch: int = 0,
    step0: int = 0,
) -> list[LossBreakdown]:
    """One epoch of plain ERM on the prompt-free forward."""
    return _train_epoch(model, data, optimizer, replace(config, toggles=Toggles.none()), rng, aug_gen, None, epoch, step0)[0]


def _train_epoch(model, data, optimizer, config, rng, aug_gen, domains, epoch, step0, step_log=None):
    model.train()
    dtype = next(model.parameters()).dtype
    images = data.chw()
    order = rng.permutation(len(data))
    losses = []
    step = step0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        x = torch.from_numpy(images[idx]).to(dtype)
        if aug_gen is not None:
            x = augment_batch(x, aug_gen)
        y = torch.from_numpy(data.labels[idx])
        dom = None if domains is None else torch.from_numpy(domains[idx])
        loss, bd = compute_step_loss(
            model.encoder, model.generator, model.adapter, x, y, dom, config.toggles, rng,
            alpha=config.alpha, lambda_w=config.lambda_w, double_norm=config.double_norm,
        )
        if not math.isfinite(bd.total):
            raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        step += 1
        losses.append(bd)
        if step_log is not None:
            step_log.append({
                "step": step, "epoch": epoch, "total": bd.total, "mixup": bd.mixup_loss,
                "weighted_ce": bd.weighted_ce, "weight_sup": bd.weight_supervision,
            })
    return losses, step


def fit(
    config: TrainConfig,
    data: DatasetBundle,
    run_dir: str | Path | None = None,
    diagnostic_layers: list[int] | None = None,
    dtype=torch.float32,
) -> FitResult:
    """Train one model; returns the selected checkpoint and its history.

    ``diagnostic_layers`` enables per-epoch clustering diagnostics (NMI
    against class, given domain and previous epoch) for those layers.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    t = config.toggles
    if t.P and config.M > len(data.train):
        raise TrainingError(f"cannot cluster {len(data.train)} samples into M={config.M} pseudo-domains")
    if config.selection == "ood-val" and "val_ood" not in data.tests:
        raise ConfigError("selection 'ood-val' needs a 'val_ood' split in the dataset bundle")
    val_set = data.tests["val_ood"] if config.selection == "ood-val" else data.val

    torch.manual_seed(config.seed)
    model = PLDGModel(config).to(dtype)
    optimizer = _build_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    aug_gen = torch.Generator().manual_seed(config.seed + 1) if config.augment else None
    torch.manual_seed(config.seed + 2)  # dropout stream

    history = TrainingHistory()
    diag = ClusteringDiagnostics(diagnostic_layers, config.M, config.seed) if diagnostic_layers else None
    assignment: PseudoDomainAssignment | None = None
    domains = None
    metric = config.metric_name
    best_metric, best_state, stale, step = -math.inf, None, 0, 0

    for epoch in range(1, config.epochs + 1):
        pldg_phase = t.P and assignment is not None
        phase = "pldg" if pldg_phase else ("warmup" if t.P else "erm")
        epoch_cfg = config if pldg_phase else replace(config, toggles=Toggles.none())
        losses, step = _train_epoch(model, data.train, optimizer, epoch_cfg, rng, aug_gen, domains, epoch, step, history.steps)

        if diag is not None:
            diag.update(model.encoder, data.train, epoch)
        if t.P and epoch == config.cluster_epoch:
            assignment = _discover(model, data.train, config, epoch)
            domains = assignment.labels_for(data.train.sample_ids)
            if run_dir is not None:
                path = run_dir / f"assignment_epoch{epoch}.csv"
                assignment.to_csv(path)
                history.assignment_path = str(path)

        val = score_dataset(model, val_set, metric, prompted=pldg_phase)
        history.records.append(EpochRecord(epoch, phase, float(np.mean([b.total for b in losses])), val))
        logger.info("epoch %d [%s] loss %.4f val_%s %.4f", epoch, phase, history.records[-1].train_loss, metric, val)

        if t.P and not pldg_phase:
            continue
        if val >= best_metric:
            # ties move the selection to the later, longer-trained epoch
            stale = 0 if val > best_metric else stale + 1
            best_metric = val
            best_state = copy.deepcopy(model.state_dict())
            history.selected_epoch = epoch
        else:
            stale += 1
        if stale >= config.patience:
            history.stopped_early = epoch < config.epochs
            break

    model.load_state_dict(best_state)
    for r in history.records:
        r.selected = r.epoch == history.selected_epoch
    result = FitResult(model, history, assignment)
    if diag is not None and run_dir is not None:
        diag.to_csv(run_dir / "diagnostics.csv")
        history.diagnostics_path = str(run_dir / "diagnostics.csv")
    result.diagnostics = diag
    if run_dir is not None:
        result.checkpoint = save_model(run_dir / "checkpoint.pt", model, assignment, history)
        history.to_csv(run_dir / "history.csv")
        history.steps_to_csv(run_dir / "train_log.csv")
    return result


def _discover(model: PLDGModel, train: ImageDataset, config: TrainConfig, epoch: int) -> PseudoDomainAssignment:
    style = collect_style_features(model.encoder, train, config.cluster_layer, epoch=epoch)
    try:
        res = cluster_style_features(
            style, config.M, seed=config.seed, normalize=config.normalize_features,
            per_class=train.labels if config.per_class_clustering else None,
            n_init=config.kmeans_restarts,
        )
        return assign_pseudo_domains(train, res)
    except (ConfigError, ValueError) as e:
        raise TrainingError(f"pseudo-domain clustering failed at epoch {epoch}: {e}") from e


# --------------------------------------------------------------------------
# checkpoints


def save_model(path: str | Path, model: PLDGModel, assignment: PseudoDomainAssignment | None, history: TrainingHistory | None = None) -> Path:
    path = Path(path)
    extra = {
        "train_config": model.config.to_dict(),
        "assignment": None if assignment is None else dict(assignment.assignment),
        "assignment_layer": None if assignment is None else assignment.layer,
        "assignment_epoch": None if assignment is None else assignment.epoch,
        "centroids": None if assignment is None else assignment.centroids,
        "selected_epoch": None if history is None else history.selected_epoch,
        "val_metric": None if history is None or history.selected_epoch is None else history.best_metric,
    }
    save_checkpoint(path, model.config.encoder, model.state_dict(), model.config.seed, extra)
    return path


def load_model(path: str | Path) -> tuple[PLDGModel, TrainConfig, PseudoDomainAssignment | None]:
    from types import MappingProxyType

    payload = load_checkpoint(path)
    extra = payload["extra"]
    if "train_config" not in extra:
        raise LoadError(f"{path}: not a training checkpoint (no train_config)")
    config = TrainConfig.from_dict(extra["train_config"])
    if config.encoder != payload["encoder"]:
        raise LoadError(f"{path}: encoder config disagrees with train config")
    model = PLDGModel(config)
    state = payload["state_dict"]
    model = model.to(next(iter(state.values())).dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise LoadError(f"{path}: checkpoint does not match its config: {e}") from e
    model.eval()
    assignment = None
    if extra.get("assignment") is not None:
        assignment = PseudoDomainAssignment(
            MappingProxyType(extra["assignment"]), np.asarray(extra["centroids"]), config.M,
            extra["assignment_layer"], extra["assignment_epoch"],
        )
    return model, config, assignment
