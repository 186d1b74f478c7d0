"""Domain prompt generator and prompt-weighting adapter.

Each domain prompt is the Hadamard product of a shared prompt with a
rank-one matrix, ``P^m = P* * (u_m v_m^T)``, so domains share knowledge only
through ``P*``. The adapter maps a prompt-free class token to a point on the
M-simplex; the weighted prompt is the matching convex combination of domain
prompts.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from pldg.errors import ConfigError

SIMPLEX_TOL = 1e-5


class PromptGenerator(nn.Module):
    """M domain prompts of shape s x d.

    With ``factorized=False`` the prompts are M independent s x d
    parameters (the "+P" ablation, no generator).
    """

    def __init__(
        self,
        num_domains: int,
        prompt_length: int,
        embed_dim: int,
        factorized: bool = True,
        shared_std: float = 0.02,
        factor_mean: float = 1.0,
        factor_std: float = 0.5,
    ):
        super().__init__()
        if num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")
        self.num_domains = num_domains
        self.prompt_length = prompt_length
        self.embed_dim = embed_dim
        self.factorized = factorized
        if factorized:
            self.shared = nn.Parameter(torch.randn(prompt_length, embed_dim) * shared_std)
            self.u = nn.Parameter(factor_mean + factor_std * torch.randn(num_domains, prompt_length))
            self.v = nn.Parameter(factor_mean + factor_std * torch.randn(num_domains, embed_dim))
        else:
            self.prompts = nn.Parameter(torch.randn(num_domains, prompt_length, embed_dim) * shared_std)

    def _check_domain(self, m: int):
        if not 0 <= m < self.num_domains:
            raise ConfigError(f"domain id must lie in [0, {self.num_domains}), got {m}")

    def rank_one(self, m: int) -> torch.Tensor:
        self._check_domain(m)
        return torch.outer(self.u[m], self.v[m])

    def generate(self, m: int) -> torch.Tensor:
        """Prompt of domain ``m``: ``P*[i, j] * u_m[i] * v_m[j]``."""
        self._check_domain(m)
        if not self.factorized:
            return self.prompts[m]
        return self.shared * torch.outer(self.u[m], self.v[m])

    def all_prompts(self) -> torch.Tensor:
        """M x s x d stack of every domain prompt."""
        if not self.factorized:
            return self.prompts
        return self.shared.unsqueeze(0) * (self.u.unsqueeze(2) * self.v.unsqueeze(1))

    def forward(self, domains: torch.Tensor) -> torch.Tensor:
        """Per-sample prompts (B x s x d) for a vector of domain ids."""
        domains = torch.as_tensor(domains, dtype=torch.long)
        if domains.numel() and (domains.min() < 0 or domains.max() >= self.num_domains):
            raise ConfigError(f"domain ids must lie in [0, {self.num_domains})")
        return self.all_prompts()[domains]


class Adapter(nn.Module):
    """Two affine layers with a rectifier between, softmax over M outputs."""

    def __init__(self, embed_dim: int, num_domains: int, hidden: int | None = None, zero_init: bool = True):
        super().__init__()
        hidden = embed_dim if hidden is None else hidden
        self.embed_dim = embed_dim
        self.num_domains = num_domains
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, num_domains)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def logits(self, cls_feature: torch.Tensor) -> torch.Tensor:
        if cls_feature.dim() != 2 or cls_feature.shape[1] != self.embed_dim:
            raise ConfigError(f"adapter expects B x {self.embed_dim} features, got {tuple(cls_feature.shape)}")
        return self.fc2(self.act(self.fc1(cls_feature)))

    def forward(self, cls_feature: torch.Tensor) -> torch.Tensor:
        return self.logits(cls_feature).softmax(dim=-1)


def adapter_weights(adapter: Adapter, cls_feature: torch.Tensor) -> torch.Tensor:
    """B x M prompt weights, each row on the simplex."""
    return adapter(cls_feature)


def check_simplex(w: torch.Tensor, tol: float = SIMPLEX_TOL):
    if (w < -tol).any():
        raise ConfigError("prompt weights must be non-negative")
    err = (w.sum(dim=-1) - 1).abs().max().item()
    if err > tol:
        raise ConfigError(f"prompt weights are off the simplex by {err:.3g}")


def weighted_prompt(prompts: torch.Tensor | PromptGenerator, w: torch.Tensor) -> torch.Tensor:
    """Convex combination ``sum_m w_m P^m``.

    ``prompts`` is an M x s x d stack (or a generator, evaluated fresh);
    ``w`` is a length-M vector (returns s x d) or B x M (returns B x s x d).
    """
    if isinstance(prompts, PromptGenerator):
        prompts = prompts.all_prompts()
    M = prompts.shape[0]
    if w.shape[-1] != M:
        raise ConfigError(f"weights have {w.shape[-1]} entries, expected {M}")
    check_simplex(w)
    w = w.to(prompts.dtype)
    if w.dim() == 1:
        return torch.einsum("m,msd->sd", w, prompts)
    return torch.einsum("bm,msd->bsd", w, prompts)


def uniform_weights(batch: int, num_domains: int, dtype=torch.float32) -> torch.Tensor:
    return torch.full((batch, num_domains), 1.0 / num_domains, dtype=dtype)
