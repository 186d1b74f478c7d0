"""A small vision transformer with shallow prompt insertion.

Token layout is ``[class, prompts, patches]``. Prompts are prepended once at
the input of block 1 and carried through every block's self-attention.
Patch tokens carry learned position embeddings; class and prompt tokens do
not. The classification head (LayerNorm + Linear) reads the class token only.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from pldg.errors import ConfigError, LoadError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 128
    depth: int = 6
    num_heads: int = 4
    num_classes: int = 2
    drop_rate: float = 0.0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate must lie in [0, 1)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        try:
            base = ENCODER_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(ENCODER_PRESETS)}") from None
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**dict(d))


ENCODER_PRESETS = {
    "desk": dict(image_size=32, patch_size=4, embed_dim=128, depth=6, num_heads=4),
    "tiny": dict(image_size=32, patch_size=4, embed_dim=64, depth=4, num_heads=4),
    "micro": dict(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2),
    "vitb16": dict(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
}


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, drop: float):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.drop(self.proj(out))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, drop: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, drop)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(drop), nn.Linear(hidden, dim), nn.Dropout(drop))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Encoder F plus classification head H."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, d))
        self.pos_drop = nn.Dropout(config.drop_rate)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio, config.drop_rate) for _ in range(config.depth)
        )
        self.head = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, config.num_classes))
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_images(self, images: torch.Tensor):
        c = self.config
        if images.dim() != 4:
            raise ConfigError(f"images must be B x 3 x H x W, got {tuple(images.shape)}")
        B, ch, H, W = images.shape
        if B < 1:
            raise ConfigError("batch dimension must be >= 1")
        if ch != 3:
            raise ConfigError(f"channel dimension is {ch}, expected 3")
        if H != c.image_size or W != c.image_size:
            raise ConfigError(f"image height/width {H}x{W} does not match image_size {c.image_size}")

    def _check_prompts(self, prompts: torch.Tensor, batch: int) -> torch.Tensor:
        d = self.config.embed_dim
        if prompts.dim() == 2:
            prompts = prompts.unsqueeze(0).expand(batch, -1, -1)
        if prompts.dim() != 3 or prompts.shape[-1] != d:
            raise ConfigError(f"prompt width must equal embed_dim {d}, got shape {tuple(prompts.shape)}")
        if prompts.shape[0] != batch:
            raise ConfigError(f"per-sample prompts have batch {prompts.shape[0]}, images have {batch}")
        return prompts.to(self.cls_token.dtype)

    def tokens(self, images: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        """Input sequence of block 1: ``[class, prompts, patches]``."""
        self._check_images(images)
        B = images.shape[0]
        patches = self.patch_embed(images.to(self.cls_token.dtype)).flatten(2).transpose(1, 2)
        patches = self.pos_drop(patches + self.pos_embed)
        parts = [self.cls_token.expand(B, -1, -1)]
        if prompts is not None and prompts.shape[-2] > 0:
            parts.append(self._check_prompts(prompts, B))
        elif prompts is not None:
            self._check_prompts(prompts, B)
        parts.append(patches)
        return torch.cat(parts, dim=1)

    def encode(self, images, prompts=None, layers: Iterable[int] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Final class token and class tokens after each requested block (1-based)."""
        wanted = set(layers)
        x = self.tokens(images, prompts)
        per_layer = {}
        last = max(wanted) if wanted else self.config.depth
        for i, blk in enumerate(self.blocks[:last], start=1):
            x = blk(x)
            if i in wanted:
                per_layer[i] = x[:, 0]
        return x[:, 0], per_layer

    def forward_plain(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        cls, _ = self.encode(images)
        return cls, self.head(cls)

    def forward_prompted(self, images: torch.Tensor, prompt_tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``prompt_tokens`` is s x d (shared) or B x s x d (per sample)."""
        cls, _ = self.encode(images, prompt_tokens)
        return cls, self.head(cls)

    def forward(self, images, prompt_tokens=None):
        if prompt_tokens is None:
            return self.forward_plain(images)[1]
        return self.forward_prompted(images, prompt_tokens)[1]

    @torch.no_grad()
    def extract_cls(self, images: torch.Tensor, layer: int) -> torch.Tensor:
        """Class token after block ``layer`` in eval mode (dropout off, no grad)."""
        if not 1 <= layer <= self.config.depth:
            raise ConfigError(f"layer must lie in [1, {self.config.depth}], got {layer}")
        was_training = self.training
        self.eval()
        try:
            if layer == self.config.depth:
                return self.encode(images)[0]
            return self.encode(images, layers=[layer])[1][layer]
        finally:
            self.train(was_training)

    @torch.no_grad()
    def extract_layers(self, images: torch.Tensor, layers: Iterable[int]) -> dict[int, torch.Tensor]:
        layers = sorted(set(layers))
        for layer in layers:
            if not 1 <= layer <= self.config.depth:
                raise ConfigError(f"layer must lie in [1, {self.config.depth}], got {layer}")
        was_training = self.training
        self.eval()
        try:
            return self.encode(images, layers=layers)[1]
        finally:
            self.train(was_training)

    def set_backbone_trainable(self, trainable: bool):
        for p in self.parameters():
            p.requires_grad_(trainable)
        for p in self.head.parameters():
            p.requires_grad_(True)


def build_encoder(config: EncoderConfig, seed: int | None = None, dtype=torch.float32) -> ViTEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    return ViTEncoder(config).to(dtype)


def save_checkpoint(path: str | Path, config: EncoderConfig, state_dict: Mapping, seed: int, extra: Mapping | None = None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder": asdict(config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
        "seed": int(seed),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint format_version {version}")
    payload["encoder"] = EncoderConfig.from_dict(payload["encoder"])
    return payload


def load_encoder(path: str | Path) -> ViTEncoder:
    payload = load_checkpoint(path)
    model = ViTEncoder(payload["encoder"])
    enc_state = {k[len("encoder."):]: v for k, v in payload["state_dict"].items() if k.startswith("encoder.")}
    state = enc_state or payload["state_dict"]
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise LoadError(f"{path}: parameters do not match encoder config: {e}") from e
    return model.to(next(iter(state.values())).dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

