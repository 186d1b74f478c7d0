"""Loss terms: domain loss, domain mixup, weighted-prompt loss, total loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from pldg.backbone import ViTEncoder
from pldg.errors import ConfigError, TrainingError
from pldg.prompts import Adapter, PromptGenerator, weighted_prompt

logger = logging.getLogger(__name__)

WEIGHT_CLAMP = 1e-7


@dataclass(frozen=True)
class Toggles:
    """Ablation switches: P prompts, A adapter, M mixup, G generator."""

    P: bool = True
    A: bool = True
    M: bool = True
    G: bool = True

    def __post_init__(self):
        for name in ("A", "M", "G"):
            if getattr(self, name) and not self.P:
                raise ConfigError(f"toggle {name} requires P")

    @classmethod
    def none(cls) -> "Toggles":
        return cls(False, False, False, False)

    @classmethod
    def parse(cls, s: str) -> "Toggles":
        """Parse ``"none"``, ``"P"``, ``"P+A+M+G"``, ``"+P+A"`` ..."""
        s = s.strip()
        if s.lower() in ("", "none", "erm", "baseline"):
            return cls.none()
        parts = {p.strip().upper() for p in s.split("+") if p.strip()}
        unknown = parts - {"P", "A", "M", "G"}
        if unknown:
            raise ConfigError(f"unknown toggles {sorted(unknown)}")
        return cls(**{k: k in parts for k in "PAMG"})

    @property
    def label(self) -> str:
        on = [k for k in "PAMG" if getattr(self, k)]
        return "baseline" if not on else "+" + "+".join(on)


@dataclass
class MixupBatch:
    """Vectorised mixup samples: ``x_mix = lam * x_i + (1 - lam) * x_j``.

    ``domain_i``/``domain_j`` are the pseudo-domains (k, q) of the two
    sources; ``lam >= 0.5`` so sample i dominates.
    """

    x_mix: torch.Tensor
    y_i: torch.Tensor
    y_j: torch.Tensor
    lam: torch.Tensor
    domain_i: torch.Tensor
    domain_j: torch.Tensor
    partner: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    """``mixup_loss`` holds the first loss term: mixup, domain or plain CE per toggles."""

    mixup_loss: float
    weighted_ce: float
    weight_supervision: float
    total: float
    lambda_w: float


def _check_labels(labels: torch.Tensor, num_classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")


def domain_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of prompted logits against class labels."""
    _check_labels(labels, logits.shape[-1])
    return F.cross_entropy(logits, labels)


def mixup_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    domains: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
    num_domains: int | None = None,
    lam: float | np.ndarray | None = None,
) -> MixupBatch:
    """Pair each sample with a random partner from a different pseudo-domain.

    Partners are drawn uniformly with replacement among in-batch samples of
    other domains. ``lam`` overrides the Beta(alpha, alpha) draw (used by
    tests); drawn values are folded to ``max(lam, 1 - lam)``.
    """
    B = len(labels)
    dom = np.asarray(domains.cpu() if torch.is_tensor(domains) else domains)
    num_domains = int(dom.max()) + 1 if num_domains is None else num_domains
    partner = np.empty(B, dtype=np.int64)
    warned = False
    for i in range(B):
        pool = np.flatnonzero(dom != dom[i])
        if len(pool) == 0:
            if num_domains >= 2 and not warned:
                logger.warning("mixup batch holds a single pseudo-domain; using in-domain partners")
                warned = True
            pool = np.arange(B)
        partner[i] = pool[rng.integers(len(pool))]
    if lam is None:
        lam = rng.beta(alpha, alpha, size=B) if alpha > 0 else np.ones(B)
        lam = np.maximum(lam, 1.0 - lam)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,)).copy()
    if (lam < 0).any() or (lam > 1).any():
        raise ConfigError("mixup coefficients must lie in [0, 1]")

    pidx = torch.as_tensor(partner)
    lam_t = torch.as_tensor(lam, dtype=images.dtype)
    shape = (B,) + (1,) * (images.dim() - 1)
    x_mix = lam_t.view(shape) * images + (1 - lam_t.view(shape)) * images[pidx]
    dom_t = torch.as_tensor(dom, dtype=torch.long)
    return MixupBatch(x_mix, labels, labels[pidx], lam_t, dom_t, dom_t[pidx], partner)


def mixup_ce(logits: torch.Tensor, mix: MixupBatch) -> torch.Tensor:
    """Mean of ``lam * CE(y_i) + (1 - lam) * CE(y_j)``."""
    _check_labels(mix.y_i, logits.shape[-1])
    _check_labels(mix.y_j, logits.shape[-1])
    lam = mix.lam.to(logits.dtype)
    ce_i = F.cross_entropy(logits, mix.y_i, reduction="none")
    ce_j = F.cross_entropy(logits, mix.y_j, reduction="none")
    return (lam * ce_i + (1 - lam) * ce_j).mean()


def mixup_loss(model: ViTEncoder, generator: PromptGenerator, mix: MixupBatch) -> torch.Tensor:
    """Mixed images routed through the prompt of the dominant sample's domain."""
    _, logits = model.forward_prompted(mix.x_mix, generator(mix.domain_i))
    return mixup_ce(logits, mix)


def weight_supervision(w: torch.Tensor, domains: torch.Tensor, num_domains: int, double_norm: bool = True) -> torch.Tensor:
    """Binary cross-entropy pushing ``w[m]`` to 1 and the rest to 0 for domain-m samples.

    Per domain present in the batch the per-sample terms are averaged, then
    summed over domains and scaled by 1/M twice (``double_norm``) or once.
    """
    w = w.clamp(WEIGHT_CLAMP, 1 - WEIGHT_CLAMP)
    target = F.one_hot(domains.long(), num_domains).to(w.dtype)
    per_sample = -(target * torch.log(w) + (1 - target) * torch.log1p(-w)).sum(dim=1)
    total = w.new_zeros(())
    for m in torch.unique(domains):
        total = total + per_sample[domains == m].mean()
    scale = 1.0 / num_domains**2 if double_norm else 1.0 / num_domains
    return total * scale


def weighted_loss(
    model: ViTEncoder,
    generator: PromptGenerator,
    adapter: Adapter,
    images: torch.Tensor,
    labels: torch.Tensor,
    domains: torch.Tensor,
    lambda_w: float = 1.0,
    double_norm: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, torch.Tensor]]:
    """Simulated inference on source images, supervised by pseudo-domain ids.

    The adapter reads a detached prompt-free class token, and the domain
    prompts are detached before weighting: weight supervision trains the
    adapter alone and the classification term cannot move ``P*, u, v``.
    Returns (loss, weights, parts) with parts ``weighted_ce`` and
    ``weight_supervision``.
    """
    cls, _ = model.forward_plain(images)
    w = adapter(cls.detach())
    prompts = generator.all_prompts().detach()
    _, logits = model.forward_prompted(images, weighted_prompt(prompts, w))
    ce = F.cross_entropy(logits, labels)
    _check_labels(labels, logits.shape[-1])
    sup = weight_supervision(w, domains, generator.num_domains, double_norm)
    return ce + lambda_w * sup, w, {"weighted_ce": ce, "weight_supervision": sup}


def _scalar(v) -> float:
    return 0.0 if v is None else float(v.detach()) if torch.is_tensor(v) else float(v)


def total_loss(first: torch.Tensor, weighted_ce=None, weight_sup=None, lambda_w: float = 1.0) -> tuple[torch.Tensor, LossBreakdown]:
    """``first + weighted_ce + lambda_w * weight_sup``; missing parts count as 0."""
    parts = {"first": first, "weighted_ce": weighted_ce, "weight_supervision": weight_sup}
    for name, v in parts.items():
        if v is not None and not math.isfinite(_scalar(v)):
            raise TrainingError(f"non-finite loss component: {name} = {float(v)}")
    total = first
    if weighted_ce is not None:
        total = total + weighted_ce
    if weight_sup is not None:
        total = total + lambda_w * weight_sup
    bd = LossBreakdown(
        mixup_loss=_scalar(first),
        weighted_ce=_scalar(weighted_ce),
        weight_supervision=_scalar(weight_sup),
        total=_scalar(total),
        lambda_w=float(lambda_w),
    )
    return total, bd


def compute_step_loss(
    model: ViTEncoder,
    generator: PromptGenerator | None,
    adapter: Adapter | None,
    images: torch.Tensor,
    labels: torch.Tensor,
    domains: torch.Tensor | None,
    toggles: Toggles,
    rng: np.random.Generator,
    alpha: float = 0.3,
    lambda_w: float = 1.0,
    double_norm: bool = True,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Loss of one training step for any point of the ablation lattice."""
    if not toggles.P:
        _, logits = model.forward_plain(images)
        return total_loss(domain_loss(logits, labels))
    if toggles.M:
        mix = mixup_batch(images, labels, domains, alpha, rng, generator.num_domains)
        first = mixup_loss(model, generator, mix)
    else:
        _, logits = model.forward_prompted(images, generator(domains))
        first = domain_loss(logits, labels)
    if not toggles.A:
        return total_loss(first)
    _, _, parts = weighted_loss(model, generator, adapter, images, labels, domains, lambda_w, double_norm)
    return total_loss(first, parts["weighted_ce"], parts["weight_supervision"], lambda_w)
