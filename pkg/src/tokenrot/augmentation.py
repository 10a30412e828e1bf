"""Two-view construction for token-level pre-training.

Both views get an independent random texture augmentation. One view is then
spatially transformed by a grid symmetry (rotate), the other is block-masked.
The spatial transform is kept so the encoder output of the rotated view can be
restored to the original token order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, MaskRatioTooHigh
from .spatial_group import IDENTITY, SpatialTransform, apply_to_volume, sample_valid_transform
from .synthetic_data import Volume

#: masking more than this leaves too little visible content
MAX_MASK_RATIO = 0.85


@dataclass
class AugmentationConfig:
    noise_std: Tuple[float, float] = (0.0, 0.1)
    gibbs_cutoff: Tuple[float, float] = (0.5, 1.0)
    intensity_scale: Tuple[float, float] = (0.9, 1.1)
    intensity_shift: Tuple[float, float] = (-0.1, 0.1)
    p_noise: float = 0.5
    p_gibbs: float = 0.5
    p_scale: float = 0.5
    p_shift: float = 0.5
    mask_enabled: bool = True
    mask_ratio: float = 0.75
    #: voxels per mask unit; empty means the encoder's input patch
    mask_block: Tuple[int, ...] = ()
    spatial_enabled: bool = True
    mask_on_rotated_view: bool = False

    def validate(self):
        for name in ("noise_std", "gibbs_cutoff", "intensity_scale", "intensity_shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"aug.{name}: range ({lo}, {hi}) is not ordered")
        for name in ("p_noise", "p_gibbs", "p_scale", "p_shift"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"aug.{name} must be a probability")
        if self.noise_std[0] < 0:
            raise ConfigError("aug.noise_std must be non-negative")
        if not 0 < self.gibbs_cutoff[0] <= self.gibbs_cutoff[1] <= 1:
            raise ConfigError("aug.gibbs_cutoff must lie in (0, 1]")
        check_mask_ratio(self.mask_ratio)
        if self.mask_block and (len(self.mask_block) != 3 or min(self.mask_block) < 1):
            raise ConfigError(f"aug.mask_block must be 3 positive ints, got {self.mask_block}")


def check_mask_ratio(ratio):
    if ratio > MAX_MASK_RATIO:
        raise MaskRatioTooHigh(f"mask ratio {ratio} exceeds {MAX_MASK_RATIO}")
    if ratio < 0:
        raise ConfigError(f"mask ratio must be non-negative, got {ratio}")


@dataclass
class ViewPair:
    view_rotated: Volume
    view_masked: Volume
    transform: SpatialTransform
    mask_map: np.ndarray


def gibbs_truncate(x, cutoff):
    """Keep frequencies with ``|f| <= cutoff * nyquist`` on each spatial axis."""
    axes = (-3, -2, -1)
    spec = np.fft.fftn(x, axes=axes)
    for ax in axes:
        n = x.shape[ax]
        keep = np.abs(np.fft.fftfreq(n)) <= cutoff * 0.5 + 1e-12
        shape = [1] * x.ndim
        shape[ax] = n
        spec = spec * keep.reshape(shape)
    return np.fft.ifftn(spec, axes=axes).real


def texture_augment(v: Volume, cfg: AugmentationConfig, rng: np.random.Generator) -> Volume:
    x = np.asarray(v.intensities, dtype=np.float64)
    if rng.random() < cfg.p_noise:
        x = x + rng.normal(0.0, rng.uniform(*cfg.noise_std), x.shape)
    if rng.random() < cfg.p_gibbs:
        x = gibbs_truncate(x, rng.uniform(*cfg.gibbs_cutoff))
    if rng.random() < cfg.p_scale:
        x = x * rng.uniform(*cfg.intensity_scale)
    if rng.random() < cfg.p_shift:
        x = x + rng.uniform(*cfg.intensity_shift)
    x = np.clip(x, 0.0, 1.0).astype(v.intensities.dtype)
    return v.replace(intensities=x)


def mask_units(shape, block):
    if len(block) != 3 or any(s % b for s, b in zip(shape, block)):
        raise ConfigError(f"mask block {tuple(block)} does not divide volume shape {tuple(shape)}")
    return tuple(s // b for s, b in zip(shape, block))


def block_mask(v: Volume, ratio: float, block: Sequence[int], rng: np.random.Generator):
    """Zero ``round(ratio * units)`` randomly chosen blocks in every channel."""
    check_mask_ratio(ratio)
    units = mask_units(v.shape, block)
    n_units = math.prod(units)
    n_mask = int(math.floor(ratio * n_units + 0.5))
    mask_map = np.zeros(n_units, dtype=bool)
    if n_mask:
        mask_map[rng.choice(n_units, n_mask, replace=False)] = True
    mask_map = mask_map.reshape(units)
    if not n_mask:
        return v, mask_map
    voxel_mask = mask_map
    for ax, b in enumerate(block):
        voxel_mask = np.repeat(voxel_mask, b, axis=ax)
    x = v.intensities.copy()
    x[:, voxel_mask] = 0
    return v.replace(intensities=x), mask_map


def make_view_pair(v: Volume, cfg: AugmentationConfig, patch_sizes, rng: np.random.Generator,
                   mask_block=None, transform: Optional[SpatialTransform] = None) -> ViewPair:
    """Build one rotated and one masked view of ``v``.

    ``patch_sizes`` lists the receptive patch of every token level; the spatial
    transform is drawn among those preserving the volume shape and all of them.
    ``mask_block`` defaults to ``cfg.mask_block`` and then to the input patch
    ``patch_sizes[0]``.
    """
    block = tuple(mask_block or cfg.mask_block or patch_sizes[0])
    if transform is None:
        transform = (sample_valid_transform(v.shape, patch_sizes, rng)
                     if cfg.spatial_enabled else IDENTITY)
    first = texture_augment(v, cfg, rng)
    second = texture_augment(v, cfg, rng)
    ratio = cfg.mask_ratio if cfg.mask_enabled else 0.0
    if cfg.mask_on_rotated_view:
        first, mask_map = block_mask(first, ratio, block, rng)
    else:
        second, mask_map = block_mask(second, ratio, block, rng)
    return ViewPair(apply_to_volume(first, transform), second, transform, mask_map)
