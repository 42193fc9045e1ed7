"""Patch-based transformer encoder with a linear classifier head.

The encoder exposes, for every forward pass, the class-token attention
mass assigned to each patch (averaged over layers and heads).  That
summary drives the attention-rescaled mixing coefficient used by the
mixup losses.  Patch-level mixing itself is a pure tensor op.
"""

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is missing, corrupt, or incompatible."""


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.num_patches < 2:
            raise ValueError("need at least 2 patches for patch mixing")

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side


@dataclass
class ForwardOutput:
    features: torch.Tensor  # (B, D)
    logits: torch.Tensor  # (B, C)
    probs: torch.Tensor  # (B, C), rows on the simplex
    attention: torch.Tensor  # (B, m) class-token -> patch scores


@dataclass
class MixSpec:
    """Mixing recipe for one mixed sample built from components i and j."""

    i: int
    j: int
    lambdas: torch.Tensor  # (m,) in [0, 1]
    beta_params: tuple = (1.0, 1.0)


class _Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)  # (b, heads, n, n)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        # class-token attention over patch tokens, averaged over heads
        cls_attn = attn[:, :, 0, 1:].mean(dim=1)
        return self.proj(out), cls_attn


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        attn_out, cls_attn = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, cls_attn


class PatchEncoder(nn.Module):
    """Tiny ViT-style encoder; returns class-token features plus the
    per-patch class-token attention averaged over layers and heads."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            cfg.channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [_Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x):
        b = x.shape[0]
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (b, m, d)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        attn_maps = []
        for block in self.blocks:
            tokens, cls_attn = block(tokens)
            attn_maps.append(cls_attn)
        attention = torch.stack(attn_maps, dim=0).mean(dim=0)  # (b, m)
        features = self.norm(tokens)[:, 0]
        return features, attention


class AdaptableClassifier(nn.Module):
    """Encoder g plus linear classifier f; f can be frozen for adaptation."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg)
        self.classifier = nn.Linear(cfg.embed_dim, cfg.num_classes)

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        if images.shape[1:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"expected images of shape (*, {self.cfg.channels}, "
                f"{self.cfg.image_size}, {self.cfg.image_size}), got {tuple(images.shape)}"
            )
        features, attention = self.encoder(images)
        logits = self.classifier(features)
        return ForwardOutput(
            features=features,
            logits=logits,
            probs=F.softmax(logits, dim=-1),
            attention=attention,
        )

    def freeze_classifier(self):
        for p in self.classifier.parameters():
            p.requires_grad_(False)

    def encoder_parameters(self):
        return self.encoder.parameters()

    def classifier_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.classifier.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def mix_patches(x_i: torch.Tensor, x_j: torch.Tensor, lambdas: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-patch convex combination of two (C, H, W) images.

    Patch n of the output is lambdas[n] * x_i + (1 - lambdas[n]) * x_j,
    with patches enumerated row-major to match the encoder's ordering.
    """
    if x_i.shape != x_j.shape:
        raise ValueError("component images must share a shape")
    lambdas = torch.as_tensor(lambdas, dtype=x_i.dtype)
    if torch.any(lambdas < 0) or torch.any(lambdas > 1):
        raise ValueError("mixing coefficients must lie in [0, 1]")
    c, h, w = x_i.shape
    hp, wp = h // patch_size, w // patch_size
    if lambdas.numel() != hp * wp:
        raise ValueError(f"expected {hp * wp} coefficients, got {lambdas.numel()}")
    lam = lambdas.reshape(1, hp, 1, wp, 1)
    xi = x_i.reshape(c, hp, patch_size, wp, patch_size)
    xj = x_j.reshape(c, hp, patch_size, wp, patch_size)
    return (lam * xi + (1 - lam) * xj).reshape(c, h, w)


def lambda_hat(
    lambdas: torch.Tensor,
    attn_i: torch.Tensor,
    attn_j: torch.Tensor,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Attention-rescaled mixing coefficient in [0, 1].

    Weighs the attention mass attributed to each component's patches:
    sum(lam * a_i) / (sum(lam * a_i) + sum((1 - lam) * a_j)).
    """
    lambdas = torch.as_tensor(lambdas, dtype=torch.float64)
    attn_i = torch.as_tensor(attn_i, dtype=torch.float64)
    attn_j = torch.as_tensor(attn_j, dtype=torch.float64)
    num = (lambdas * attn_i).sum()
    den = num + ((1 - lambdas) * attn_j).sum() + eps
    if den <= 0:
        raise FloatingPointError("attention mass vanished in lambda rescaling")
    return num / den


def save_checkpoint(path, model: AdaptableClassifier, source_val_acc: Optional[float] = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder_config": vars(model.cfg),
        "encoder_state": model.encoder.state_dict(),
        "classifier_state": model.classifier.state_dict(),
        "source_val_acc": source_val_acc,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple:
    """Load (model, source_val_acc) from a checkpoint archive."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # missing file, truncated archive, pickle error
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    cfg = EncoderConfig(**payload["encoder_config"])
    model = AdaptableClassifier(cfg)
    model.encoder.load_state_dict(payload["encoder_state"])
    model.classifier.load_state_dict(payload["classifier_state"])
    return model, payload.get("source_val_acc")
