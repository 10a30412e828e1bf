"""Exact symmetries of a 3D voxel grid.

A :class:`SpatialTransform` is an axis permutation followed by per-axis flips,
which covers all 48 quarter-turn rotations and reflections of the cube. Every
operation is pure re-indexing, so applying a transform and then its inverse
returns the input bit for bit.

Transforms act on the last three axes of an array, so the same element can be
applied to a ``C x D x H x W`` volume, a ``D x H x W`` label map, a
``C x h x w x d`` token grid or a batched torch tensor.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ShapeNotInvariant

__all__ = [
    "SpatialTransform", "IDENTITY", "all_transforms", "compose", "inverse",
    "is_shape_invariant", "apply_to_grid", "apply_to_volume", "restore_token_grid",
    "valid_transforms", "sample_valid_transform",
]


@dataclass(frozen=True)
class SpatialTransform:
    """Grid symmetry.

    Output axis ``k`` is read from input axis ``axis_perm[k]`` and is then
    reversed when ``flips[k]`` is set.
    """

    axis_perm: Tuple[int, int, int] = (0, 1, 2)
    flips: Tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        perm = tuple(int(p) for p in self.axis_perm)
        flips = tuple(bool(f) for f in self.flips)
        if sorted(perm) != [0, 1, 2] or len(flips) != 3:
            raise ValueError(f"not a grid symmetry: perm={self.axis_perm}, flips={self.flips}")
        object.__setattr__(self, "axis_perm", perm)
        object.__setattr__(self, "flips", flips)

    @property
    def is_identity(self):
        return self == IDENTITY

    def to_ints(self):
        """Six-integer serialization: the permutation then the flips as 0/1."""
        return [*self.axis_perm, *(int(f) for f in self.flips)]

    @classmethod
    def from_ints(cls, values: Sequence[int]):
        values = [int(v) for v in values]
        if len(values) != 6 or any(v not in (0, 1) for v in values[3:]):
            raise ValueError(f"expected 3 permutation entries and 3 flags, got {values}")
        return cls(tuple(values[:3]), tuple(bool(v) for v in values[3:]))

    def __str__(self):
        flips = "".join("F" if f else "-" for f in self.flips)
        return f"perm{self.axis_perm}/{flips}"


IDENTITY = SpatialTransform()


def all_transforms():
    """All 48 elements, in a fixed order (identity first)."""
    return [
        SpatialTransform(perm, flips)
        for perm in itertools.permutations(range(3))
        for flips in itertools.product((False, True), repeat=3)
    ]


def compose(t1: SpatialTransform, t2: SpatialTransform) -> SpatialTransform:
    """Element equal to applying ``t2`` first and ``t1`` second."""
    perm = tuple(t2.axis_perm[t1.axis_perm[k]] for k in range(3))
    flips = tuple(t1.flips[k] != t2.flips[t1.axis_perm[k]] for k in range(3))
    return SpatialTransform(perm, flips)


def inverse(t: SpatialTransform) -> SpatialTransform:
    perm = [0, 0, 0]
    for k, p in enumerate(t.axis_perm):
        perm[p] = k
    flips = tuple(t.flips[perm[k]] for k in range(3))
    return SpatialTransform(tuple(perm), flips)


def is_shape_invariant(shape: Sequence[int], t: SpatialTransform) -> bool:
    shape = tuple(shape)[-3:]
    return all(shape[t.axis_perm[k]] == shape[k] for k in range(3))


def apply_to_grid(x, t: SpatialTransform):
    """Apply ``t`` to the last three axes of a numpy array or torch tensor."""
    if not is_shape_invariant(x.shape, t):
        raise ShapeNotInvariant(
            f"spatial shape {tuple(x.shape[-3:])} is not invariant under {t}")
    lead = x.ndim - 3
    order = list(range(lead)) + [lead + p for p in t.axis_perm]
    flip_axes = [lead + k for k in range(3) if t.flips[k]]
    if isinstance(x, np.ndarray):
        out = np.transpose(x, order)
        if flip_axes:
            out = np.flip(out, flip_axes)
        return np.ascontiguousarray(out)
    out = x.permute(*order)
    if flip_axes:
        out = out.flip(flip_axes)
    return out.contiguous()


def apply_to_volume(v, t: SpatialTransform):
    """Transform a :class:`~tokenrot.synthetic_data.Volume` (intensities and label
    together) or a bare array."""
    if hasattr(v, "intensities"):
        if not is_shape_invariant(v.intensities.shape, t):
            raise ShapeNotInvariant(
                f"volume shape {v.intensities.shape[-3:]} is not invariant under {t}")
        label = None if v.label is None else apply_to_grid(v.label, t)
        spacing = tuple(v.spacing[p] for p in t.axis_perm)
        return v.replace(intensities=apply_to_grid(v.intensities, t), label=label,
                         spacing=spacing)
    return apply_to_grid(v, t)


def restore_token_grid(g, t: SpatialTransform):
    """Undo ``t`` on an encoder output so token positions line up with the
    untransformed view."""
    return apply_to_grid(g, inverse(t))


def valid_transforms(grid_shape: Sequence[int], patch_sizes: Sequence[Sequence[int]] = ()):
    """Elements that preserve ``grid_shape`` and every patch extent.

    The eight pure flips always qualify, so the result is never empty.
    """
    return [
        t for t in all_transforms()
        if is_shape_invariant(grid_shape, t)
        and all(is_shape_invariant(p, t) for p in patch_sizes)
    ]


def sample_valid_transform(grid_shape, patch_sizes, rng: np.random.Generator):
    candidates = valid_transforms(grid_shape, patch_sizes)
    return candidates[int(rng.integers(len(candidates)))]
