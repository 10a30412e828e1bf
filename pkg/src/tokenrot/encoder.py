"""Toy-scale 3D transformer encoders.

Two variants share the building blocks below:

* ``hierarchical``: Swin-style. Patch partition, stages of window attention
  blocks (alternating shifted windows), and 2x2x2 patch merging between stages
  that halves the grid and doubles the channels.
* ``flat``: UNETR-style. Large patches, one stage, global attention, constant
  width.

Token grids travel through the stages channels-last ``(B, h, w, d, C)`` and are
returned channels-first ``(B, C, h, w, d)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (ConfigError, KeyMismatch, NonFiniteActivation, OddShape, ShapeMismatch,
                     WindowMismatch)


@dataclass
class EncoderConfig:
    variant: str = "hierarchical"
    in_channels: int = 1
    input_shape: Tuple[int, int, int] = (32, 32, 32)
    patch_size: Tuple[int, int, int] = (2, 2, 2)
    n_stages: int = 3
    blocks_per_stage: int = 2
    embed_dims: Tuple[int, ...] = (16, 32, 64)
    window_size: Tuple[int, int, int] = (4, 4, 4)
    n_heads: Tuple[int, ...] = (2, 2, 2)
    use_shifted_windows: bool = True
    mlp_ratio: float = 2.0
    #: LayerNorm after the patch projection and on every stage output
    patch_norm: bool = True
    output_norm: bool = True
    #: z-score every input volume per channel before patch partition
    standardize_input: bool = True

    @classmethod
    def flat(cls, input_shape=(32, 32, 32), in_channels=1):
        grid = tuple(s // 8 for s in input_shape)
        return cls(variant="flat", in_channels=in_channels, input_shape=tuple(input_shape),
                   patch_size=(8, 8, 8), n_stages=1, blocks_per_stage=4, embed_dims=(48,),
                   window_size=grid, n_heads=(4,), use_shifted_windows=False)

    def token_shapes(self) -> List[Tuple[int, int, int]]:
        """Token grid shape at each stage."""
        grid = tuple(s // p for s, p in zip(self.input_shape, self.patch_size))
        shapes = []
        for s in range(self.n_stages):
            shapes.append(grid)
            grid = tuple(g // 2 for g in grid)
        return shapes

    def receptive_patches(self) -> List[Tuple[int, int, int]]:
        """Voxel extent covered by one token at each stage."""
        step = 2 if self.variant == "hierarchical" else 1
        return [tuple(p * step ** s for p in self.patch_size) for s in range(self.n_stages)]

    def stage_windows(self) -> List[Tuple[int, int, int]]:
        """Window per stage, clipped to the grid where the grid is smaller."""
        return [tuple(min(w, g) for w, g in zip(self.window_size, grid))
                for grid in self.token_shapes()]

    @property
    def out_dim(self):
        return self.embed_dims[-1]

    def validate(self):
        if self.variant not in ("hierarchical", "flat"):
            raise ConfigError(f"encoder.variant must be hierarchical or flat, got {self.variant!r}")
        if self.variant == "flat" and self.n_stages != 1:
            raise ConfigError("flat encoder has exactly one stage")
        for name in ("input_shape", "patch_size", "window_size"):
            v = getattr(self, name)
            if len(v) != 3 or min(v) < 1:
                raise ConfigError(f"encoder.{name} must be 3 positive ints, got {v}")
        if len(self.embed_dims) != self.n_stages or len(self.n_heads) != self.n_stages:
            raise ConfigError("encoder.embed_dims and encoder.n_heads need one entry per stage")
        for s, (dim, heads) in enumerate(zip(self.embed_dims, self.n_heads)):
            if dim % heads:
                raise ConfigError(f"stage {s}: embed dim {dim} not divisible by {heads} heads")
            if s and dim != 2 * self.embed_dims[s - 1]:
                raise ConfigError("encoder.embed_dims must double at every merge")
        if any(s % p for s, p in zip(self.input_shape, self.patch_size)):
            raise ShapeMismatch(
                f"input shape {self.input_shape} not divisible by patch {self.patch_size}")
        grid = self.token_shapes()[0]
        factor = 2 ** (self.n_stages - 1)
        if any(g % factor for g in grid):
            raise ShapeMismatch(f"token grid {grid} not divisible by {factor} for "
                                f"{self.n_stages} stages")
        for s, (g, w) in enumerate(zip(self.token_shapes(), self.stage_windows())):
            if any(a % b for a, b in zip(g, w)):
                raise WindowMismatch(f"stage {s}: window {w} does not divide grid {g}")
        return self

    def to_dict(self):
        return asdict(self)


def _check(x, name):
    if not torch.isfinite(x).all():
        raise NonFiniteActivation(name)
    return x


def standardize(x, eps=1e-5):
    """Per-sample, per-channel zero mean and unit variance over the spatial axes."""
    mean = x.mean(dim=(-3, -2, -1), keepdim=True)
    var = x.var(dim=(-3, -2, -1), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class PatchEmbed(nn.Module):
    """Linear projection of each voxel block plus a learned per-position embedding."""

    def __init__(self, in_channels, dim, patch_size, grid, norm=True):
        super().__init__()
        self.patch_size = tuple(patch_size)
        self.proj = nn.Conv3d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim) if norm else None
        self.pos_embed = nn.Parameter(torch.zeros(1, dim, *grid))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        if any(s % p for s, p in zip(x.shape[-3:], self.patch_size)):
            raise ShapeMismatch(f"input {tuple(x.shape)} not divisible by patch {self.patch_size}")
        z = self.proj(x)
        if z.shape[-3:] != self.pos_embed.shape[-3:]:
            raise ShapeMismatch(
                f"token grid {tuple(z.shape[-3:])} != configured {tuple(self.pos_embed.shape[-3:])}")
        if self.norm is not None:
            z = self.norm(z.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)
        return z + self.pos_embed


def window_partition(x, window):
    """``(B, D, H, W, C)`` -> ``(B * nW, prod(window), C)``."""
    B, D, H, W, C = x.shape
    a, b, c = window
    x = x.view(B, D // a, a, H // b, b, W // c, c, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, a * b * c, C)


def window_reverse(windows, window, shape):
    D, H, W = shape
    a, b, c = window
    C = windows.shape[-1]
    x = windows.view(-1, D // a, H // b, W // c, a, b, c, C)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(-1, D, H, W, C)


def shifted_window_mask(grid, window, shift):
    """Additive mask forbidding attention between tokens that were not neighbours
    before the cyclic shift. Shape ``(nW, N, N)``."""
    img = torch.zeros(1, *grid, 1)
    region = 0
    slices = [
        (slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(None),)
        for w, s in zip(window, shift)
    ]
    for sd in slices[0]:
        for sh in slices[1]:
            for sw in slices[2]:
                img[:, sd, sh, sw, :] = region
                region += 1
    ids = window_partition(img, window).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        Bw, N, C = x.shape
        qkv = self.qkv(x).view(Bw, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.n_heads, N, N) + mask[None, :, None].to(attn)
            attn = attn.view(Bw, self.n_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm (shifted) window attention block."""

    def __init__(self, dim, n_heads, grid, window, shift=(0, 0, 0), mlp_ratio=2.0):
        super().__init__()
        self.grid = tuple(grid)
        self.window = tuple(window)
        self.shift = tuple(shift)
        if any(g % w for g, w in zip(self.grid, self.window)):
            raise WindowMismatch(f"window {self.window} does not divide grid {self.grid}")
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        mask = shifted_window_mask(self.grid, self.window, self.shift) if any(self.shift) else None
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x):
        if tuple(x.shape[1:4]) != self.grid:
            raise WindowMismatch(f"block expects grid {self.grid}, got {tuple(x.shape[1:4])}")
        shortcut = x
        x = self.norm1(x)
        if any(self.shift):
            x = torch.roll(x, shifts=tuple(-s for s in self.shift), dims=(1, 2, 3))
        x = self.attn(window_partition(x, self.window), self.attn_mask)
        x = window_reverse(x, self.window, self.grid)
        if any(self.shift):
            x = torch.roll(x, shifts=self.shift, dims=(1, 2, 3))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate each 2x2x2 group of tokens (children in (a, b, c) lexicographic
    order) and map ``8C -> 2C``."""

    def __init__(self, dim):
        super().__init__()
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        if any(s % 2 for s in x.shape[1:4]):
            raise OddShape(f"patch merging needs even grid, got {tuple(x.shape[1:4])}")
        parts = [x[:, a::2, b::2, c::2, :] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        return self.reduction(torch.cat(parts, dim=-1))


class TokenEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        shapes = cfg.token_shapes()
        windows = cfg.stage_windows()
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.embed_dims[0], cfg.patch_size,
                                      shapes[0], cfg.patch_norm)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.norms = nn.ModuleList(
            nn.LayerNorm(d) if cfg.output_norm else nn.Identity() for d in cfg.embed_dims)
        for s in range(cfg.n_stages):
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_stage):
                shifted = (cfg.use_shifted_windows and b % 2 == 1
                           and tuple(windows[s]) != tuple(shapes[s]))
                shift = tuple(w // 2 for w in windows[s]) if shifted else (0, 0, 0)
                blocks.append(TransformerBlock(cfg.embed_dims[s], cfg.n_heads[s], shapes[s],
                                               windows[s], shift, cfg.mlp_ratio))
            self.stages.append(blocks)
            if s < cfg.n_stages - 1:
                self.merges.append(PatchMerging(cfg.embed_dims[s]))
        self.apply(_init_weights)

    def forward_features(self, x) -> List[torch.Tensor]:
        """Token grid ``(B, C, h, w, d)`` after every stage."""
        if self.cfg.standardize_input:
            x = standardize(x)
        x = _check(self.patch_embed(x), "patch_embed")
        x = x.permute(0, 2, 3, 4, 1)
        outs = []
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                x = _check(block(x), f"stages.{s}.{b}")
            outs.append(_check(self.norms[s](x), f"norms.{s}").permute(0, 4, 1, 2, 3))
            if s < len(self.merges):
                x = _check(self.merges[s](x), f"merges.{s}")
        return outs

    def forward(self, x):
        return self.forward_features(x)[-1]


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_encoder(cfg: EncoderConfig, seed=None, dtype=None) -> TokenEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    enc = TokenEncoder(cfg)
    return enc.to(dtype) if dtype is not None else enc


def expected_parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count of :class:`TokenEncoder`."""
    d0 = cfg.embed_dims[0]
    grid = cfg.token_shapes()[0]
    total = cfg.in_channels * math.prod(cfg.patch_size) * d0 + d0 + d0 * math.prod(grid)
    total += 2 * d0 * cfg.patch_norm
    total += sum(2 * d for d in cfg.embed_dims) * cfg.output_norm
    for s, d in enumerate(cfg.embed_dims):
        hidden = int(d * cfg.mlp_ratio)
        block = (2 * 2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
        total += cfg.blocks_per_stage * block
        if s < cfg.n_stages - 1:
            total += 8 * d * 2 * d
    return total


def ema_update(target, online, momentum: float):
    """In-place ``target <- m * target + (1 - m) * online`` over matching parameters.

    Accepts modules or name->tensor mappings.
    """
    t_params = dict(target.named_parameters()) if isinstance(target, nn.Module) else target
    o_params = dict(online.named_parameters()) if isinstance(online, nn.Module) else online
    if t_params.keys() != o_params.keys():
        missing = sorted(set(t_params) ^ set(o_params))
        raise KeyMismatch(f"parameter names differ: {missing[:5]}")
    with torch.no_grad():
        for name, p in t_params.items():
            q = o_params[name]
            if p.shape != q.shape:
                raise KeyMismatch(f"{name}: shape {tuple(p.shape)} != {tuple(q.shape)}")
            p.mul_(momentum).add_(q.detach(), alpha=1.0 - momentum)
    return target
