"""Plain ViT-style transformer over point-patch tokens.

The patch-embedding layer of a ViT is replaced by :class:`PointTokenizer`;
everything after it (class token, pre-norm blocks, final norm) has the same
tensor layout as a 2D ViT so block weights can be imported from one.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .tokenizer import PatchSet, PointTokenizer, PositionalEmbedding, stack_patches

SCALES = {
    # name: (depth, width, heads, mlp_ratio)
    "Ti": (12, 192, 3, 4.0),
    "S": (12, 384, 6, 4.0),
    "B": (12, 768, 12, 4.0),
    "L": (24, 1024, 16, 4.0),
    "g": (40, 1408, 16, 48 / 11),  # ViT-g MLP width 6144
}


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 32
    heads: int = 2
    mlp_ratio: float = 4.0
    teacher_dim: int = 64
    drop_path_rate: float = 0.1
    scale_name: str = "custom"
    tokenizer_hidden: int = 128
    tokenizer_out: int = 256
    pos_hidden: int = 128
    pool: str = "cls"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        if self.teacher_dim < 1:
            raise ValueError(f"teacher_dim must be >= 1, got {self.teacher_dim}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.pool not in ("cls", "mean"):
            raise ValueError(f"pool must be 'cls' or 'mean', got {self.pool!r}")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def build_config(scale_name: str, **overrides) -> EncoderConfig:
    """Config for a named rung of the scaling ladder.

    ``"nano"`` is a desk-scale toy (depth 2, width 32) for tests and overfit
    runs; ``"custom"`` takes every field from ``overrides``.
    """
    if scale_name == "custom":
        return EncoderConfig(scale_name="custom", **overrides)
    if scale_name == "nano":
        base = dict(depth=2, width=32, heads=2, mlp_ratio=4.0, teacher_dim=64,
                    tokenizer_hidden=32, tokenizer_out=64, pos_hidden=32)
    elif scale_name in SCALES:
        depth, width, heads, mlp_ratio = SCALES[scale_name]
        # PointBERT-sized tokenizer and a 1024-d teacher (EVA-CLIP-E)
        base = dict(depth=depth, width=width, heads=heads, mlp_ratio=mlp_ratio, teacher_dim=1024,
                    tokenizer_hidden=256, tokenizer_out=512, pos_hidden=128)
    else:
        raise ValueError(f"unknown scale {scale_name!r}; expected one of {sorted(SCALES) + ['nano', 'custom']}")
    base.update(overrides)
    return EncoderConfig(scale_name=scale_name, **base)


def _linear(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def count_params(config: EncoderConfig) -> int:
    """Exact scalar count of an :class:`Encoder` built from ``config``."""
    w, h = config.width, config.mlp_hidden
    d1, d2, p1 = config.tokenizer_hidden, config.tokenizer_out, config.pos_hidden
    tokenizer = _linear(6, d1) + _linear(d1, d1) + _linear(2 * d1, d2) + _linear(d2, w)
    pos = _linear(3, p1) + _linear(p1, w)
    block = _linear(w, 3 * w) + _linear(w, w) + 4 * w + _linear(w, h) + _linear(h, w)
    return tokenizer + pos + w + config.depth * block + 2 * w + _linear(w, config.teacher_dim, bias=False)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, keep_attn: bool = False):
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out), (attn if keep_attn else None)


class Mlp(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def drop_path(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Per-sample stochastic depth on a residual branch."""
    if p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand((x.shape[0],) + (1,) * (x.ndim - 1), generator=generator, dtype=x.dtype) < keep
    return x * mask.to(x.dtype) / keep


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_hidden: int, drop_prob: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=1e-6)
        self.mlp = Mlp(width, mlp_hidden)
        self.drop_prob = drop_prob

    def forward(self, x, generator=None, keep_attn=False):
        p = self.drop_prob if self.training else 0.0
        a, attn = self.attn(self.norm1(x), keep_attn)
        x = x + drop_path(a, p, generator)
        x = x + drop_path(self.mlp(self.norm2(x)), p, generator)
        return x, attn


@dataclass
class ForwardOutput:
    embedding: torch.Tensor
    features: dict[int, torch.Tensor] = field(default_factory=dict)
    num_tokens: int = 0
    attention: list[torch.Tensor] = field(default_factory=list)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.width
        self.tokenizer = PointTokenizer(w, config.tokenizer_hidden, config.tokenizer_out)
        self.pos = PositionalEmbedding(w, config.pos_hidden)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, w))
        drop = np.linspace(0.0, config.drop_path_rate, config.depth) if config.depth > 1 else [0.0]
        self.blocks = nn.ModuleList(
            Block(w, config.heads, config.mlp_hidden, float(p)) for p in drop
        )
        self.norm = nn.LayerNorm(w, eps=1e-6)
        self.proj = nn.Linear(w, config.teacher_dim, bias=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            # no normalization inside the point MLPs, so they need fan-in scaled weights
            point_mlps = set(self.tokenizer.modules()) | set(self.pos.modules())
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    std = m.in_features ** -0.5 if m in point_mlps else 0.02
                    nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=g)
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04, generator=g)

    # tensors that a 2D ViT checkpoint provides
    def transformer_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()
                if n == "cls_token" or n.startswith("blocks.") or n.startswith("norm.")]

    def freeze_transformer(self, frozen: bool = True) -> None:
        params = dict(self.named_parameters())
        for n in self.transformer_names():
            params[n].requires_grad_(not frozen)

    @property
    def frozen_flags(self) -> list[bool]:
        return [not any(p.requires_grad for p in b.parameters()) for b in self.blocks]

    def check_finite(self) -> None:
        for n, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"encoder tensor {n!r} has non-finite values")

    def forward(
        self,
        coords: torch.Tensor,
        colors: torch.Tensor,
        centers: torch.Tensor,
        keep_mask: torch.Tensor | None = None,
        tap_layers: Iterable[int] = (),
        generator: torch.Generator | None = None,
        keep_attn: bool = False,
    ) -> ForwardOutput:
        """Batched forward: coords/colors (B, G, K, 3), centers (B, G, 3).

        ``keep_mask`` (B, G) drops tokens before the transformer; every row
        must keep the same number of tokens. ``tap_layers`` are 1-based block
        indices whose token outputs (class token excluded) are returned.
        """
        self.check_finite()
        taps = sorted(set(int(t) for t in tap_layers))
        if any(t < 1 or t > self.config.depth for t in taps):
            raise ValueError(f"tap layers must lie in [1, {self.config.depth}], got {taps}")
        x = self.tokenizer(coords, colors) + self.pos(centers)
        b = x.shape[0]
        if keep_mask is not None:
            keep_mask = torch.as_tensor(keep_mask, dtype=torch.bool).reshape(b, -1)
            counts = keep_mask.sum(dim=1)
            if int(counts.min()) < 1:
                raise ValueError("keep_mask must keep at least one token per cloud")
            if int(counts.max()) != int(counts.min()):
                raise ValueError("keep_mask rows must keep equal token counts")
            idx = torch.nonzero(keep_mask)[:, 1].reshape(b, -1)
            x = torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        out = ForwardOutput(embedding=x.new_zeros(()), num_tokens=x.shape[1])
        for i, blk in enumerate(self.blocks, start=1):
            x, attn = blk(x, generator, keep_attn)
            if keep_attn:
                out.attention.append(attn)
            if i in taps:
                out.features[i] = x[:, 1:]
        x = self.norm(x)
        pooled = x[:, 0] if self.config.pool == "cls" else x[:, 1:].mean(dim=1)
        out.embedding = self.proj(pooled)
        return out

    def forward_patches(self, patches: PatchSet, keep_mask=None, tap_layers=(), generator=None) -> ForwardOutput:
        """Single-cloud forward; drops the batch dimension from the result."""
        dtype = self.cls_token.dtype
        coords, colors, centers = stack_patches([patches], dtype=dtype)
        if keep_mask is not None:
            keep_mask = torch.as_tensor(np.asarray(keep_mask), dtype=torch.bool)[None]
        out = self.forward(coords, colors, centers, keep_mask, tap_layers, generator)
        out.embedding = out.embedding[0]
        out.features = {k: v[0] for k, v in out.features.items()}
        return out

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {n: p.detach() for n, p in self.named_parameters()}

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        tensors = dict(self.state_tensors())
        tensors.update(extra or {})
        save_checkpoint(path, tensors, {"config": self.config.to_dict()})


def load_encoder(path: str | os.PathLike) -> tuple[Encoder, dict[str, np.ndarray]]:
    """Rebuild an encoder from a checkpoint written by :meth:`Encoder.save`.

    Returns the encoder and any extra tensors stored alongside it.
    """
    tensors, meta = load_checkpoint(path)
    if not meta or "config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no encoder config")
    encoder = Encoder(EncoderConfig.from_dict(meta["config"]))
    params = dict(encoder.named_parameters())
    _assign(params, tensors, list(params))
    extra = {k: v for k, v in tensors.items() if k not in params}
    return encoder, extra


def _assign(params: dict[str, nn.Parameter], tensors: dict[str, np.ndarray], names: Sequence[str]) -> None:
    for n in names:
        if n not in tensors:
            raise KeyError(f"checkpoint is missing tensor {n!r}")
        if tuple(tensors[n].shape) != tuple(params[n].shape):
            raise ValueError(
                f"tensor {n!r} has shape {tuple(tensors[n].shape)}, expected {tuple(params[n].shape)}"
            )
    with torch.no_grad():
        for n in names:
            params[n].copy_(torch.from_numpy(tensors[n]))


def load_2d_prior(checkpoint_path: str | os.PathLike, encoder: Encoder, freeze_transformer: bool = False) -> Encoder:
    """Import class token, blocks and final norm from a ViT-layout checkpoint.

    Tokenizer, positional MLP and projection keep their fresh initialization.
    With ``freeze_transformer`` the imported tensors stop receiving updates.
    """
    tensors, _ = load_checkpoint(checkpoint_path)
    params = dict(encoder.named_parameters())
    _assign(params, tensors, encoder.transformer_names())
    encoder.freeze_transformer(freeze_transformer)
    return encoder
