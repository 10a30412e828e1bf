"""Synthetic multi-class "organ blob" volumes and their on-disk store.

Each volume is a noisy background holding, per foreground class, a random number
of axis-aligned ellipsoids of a class-specific brightness. The generator uses one
``numpy.random.Generator`` stream per dataset, consumed in this order per volume:

1. for class ``k = 1..K``: blob count ``n ~ U{lo..hi}``, then per blob
   ``center ~ U[0, shape)`` (3 draws), ``radii ~ U[r_lo, r_hi] * shape``
   (3 draws), ``brightness ~ U[int_lo_k, int_hi_k]`` (one draw per channel);
2. background noise ``N(0, noise)`` of shape ``(C, D, H, W)``.

A voxel with integer coordinate ``c`` lies inside a blob when
``sum(((c - center) / radii) ** 2) <= 1``. Later classes overwrite earlier ones.
If some class ends up with no voxels the volume is redrawn from the same stream.
"""
from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidFraction, InvalidFractions, InvalidSpec

SCHEMA_VERSION = 1
MAGIC = b"TROTVOL\0"
_HEADER = struct.Struct("<8sIBB2xI3I3d")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u1"), 4: np.dtype("<i4"),
           5: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_MAX_REDRAWS = 100


@dataclass
class Volume:
    intensities: np.ndarray
    label: Optional[np.ndarray] = None
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    @property
    def shape(self):
        return tuple(self.intensities.shape[-3:])

    @property
    def n_channels(self):
        return self.intensities.shape[0]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class Dataset:
    """Ordered volumes sharing a class count."""

    volumes: List[Volume]
    n_classes: int

    def __len__(self):
        return len(self.volumes)

    def __getitem__(self, i):
        return self.volumes[i]

    def __iter__(self):
        return iter(self.volumes)

    def subset(self, volumes):
        return Dataset(list(volumes), self.n_classes)


@dataclass
class DatasetSpec:
    n_volumes: int = 20
    shape: Tuple[int, int, int] = (32, 32, 32)
    n_classes: int = 3
    n_channels: int = 1
    blobs_per_class: Tuple[int, int] = (1, 2)
    radius_range: Tuple[float, float] = (0.12, 0.25)
    #: (lo, hi) brightness per foreground class; evenly spaced when empty
    intensity_ranges: Tuple[Tuple[float, float], ...] = ()
    background: float = 0.1
    noise: float = 0.05
    divisor: int = 8
    seed: int = 0

    def class_intensity_ranges(self):
        if self.intensity_ranges:
            return [tuple(r) for r in self.intensity_ranges]
        step = 0.8 / self.n_classes
        return [(0.2 + k * step, 0.2 + (k + 0.7) * step) for k in range(self.n_classes)]

    def validate(self):
        if self.n_volumes < 0:
            raise InvalidSpec(f"n_volumes must be >= 0, got {self.n_volumes}")
        if self.n_classes < 1:
            raise InvalidSpec(f"n_classes must be >= 1, got {self.n_classes}")
        if len(self.shape) != 3 or any(s < 8 or s % self.divisor for s in self.shape):
            raise InvalidSpec(
                f"shape {tuple(self.shape)} must have components >= 8 divisible by {self.divisor}")
        lo, hi = self.blobs_per_class
        if not 1 <= lo <= hi:
            raise InvalidSpec(f"blobs_per_class must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi:
            raise InvalidSpec(f"bad radius_range {(r_lo, r_hi)}")
        ranges = self.class_intensity_ranges()
        if len(ranges) != self.n_classes or any(not 0 <= a <= b <= 1 for a, b in ranges):
            raise InvalidSpec(f"need {self.n_classes} ordered intensity ranges in [0, 1]")


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _draw_volume(spec: DatasetSpec, rng: np.random.Generator, vid: str) -> Volume:
    shape = tuple(spec.shape)
    ranges = spec.class_intensity_ranges()
    for _ in range(_MAX_REDRAWS):
        clean = np.full((spec.n_channels,) + shape, spec.background)
        label = np.zeros(shape, dtype=np.uint8)
        for k in range(1, spec.n_classes + 1):
            lo, hi = spec.blobs_per_class
            for _ in range(int(rng.integers(lo, hi + 1))):
                center = rng.uniform(0, 1, 3) * shape
                radii = rng.uniform(*spec.radius_range, 3) * shape
                level = rng.uniform(*ranges[k - 1], spec.n_channels)
                inside = _ellipsoid(shape, center, radii)
                label[inside] = k
                clean[:, inside] = level[:, None]
        noise = rng.normal(0.0, spec.noise, clean.shape) if spec.noise > 0 else 0.0
        present = np.bincount(label.ravel(), minlength=spec.n_classes + 1)[1:]
        if np.all(present > 0):
            intensities = np.clip(clean + noise, 0.0, 1.0).astype(np.float32)
            return Volume(intensities, label, (1.0, 1.0, 1.0), vid)
    raise InvalidSpec("could not place every class; blobs are too small or too few")


def generate_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return Dataset([_draw_volume(spec, rng, f"{i:04d}") for i in range(spec.n_volumes)],
                   spec.n_classes)


# ---------------------------------------------------------------- storage

def _write_volume(path: Path, v: Volume):
    inten = np.ascontiguousarray(v.intensities)
    label = v.label if v.label is not None else np.zeros(v.shape, dtype=np.uint8)
    label = np.ascontiguousarray(label)
    try:
        icode = _DTYPE_CODES[inten.dtype.newbyteorder("<")]
        lcode = _DTYPE_CODES[label.dtype.newbyteorder("<")]
    except KeyError as e:
        raise FormatError(f"unsupported dtype {e}") from None
    header = _HEADER.pack(MAGIC, SCHEMA_VERSION, icode, lcode, v.n_channels, *v.shape,
                          *map(float, v.spacing))
    with open(path, "wb") as f:
        f.write(header)
        f.write(inten.astype(_DTYPES[icode], copy=False).tobytes())
        f.write(label.astype(_DTYPES[lcode], copy=False).tobytes())


def _read_volume(path: Path, vid: str) -> Volume:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, icode, lcode, channels, d, h, w, *spacing = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: unknown schema version {version}")
    if icode not in _DTYPES or lcode not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code in field 'dtype' ({icode}, {lcode})")
    idt, ldt = _DTYPES[icode], _DTYPES[lcode]
    n_i = channels * d * h * w
    n_l = d * h * w
    expected = _HEADER.size + n_i * idt.itemsize + n_l * ldt.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: field 'payload' has {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    inten = np.frombuffer(data, idt, n_i, off).reshape(channels, d, h, w)
    off += n_i * idt.itemsize
    label = np.frombuffer(data, ldt, n_l, off).reshape(d, h, w)
    return Volume(inten.astype(idt.newbyteorder("="), copy=True),
                  label.astype(ldt.newbyteorder("="), copy=True), tuple(spacing), vid)


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``index.txt`` plus one ``vol_<id>.bin`` per volume."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"schema_version={SCHEMA_VERSION}", f"n_classes={ds.n_classes}",
             f"n_volumes={len(ds)}"]
    for i, v in enumerate(ds):
        if not v.id or any(c in v.id for c in "=/\\\n" + os.sep):
            raise FormatError(f"volume {i}: id {v.id!r} is not a valid file stem")
        _write_volume(path / f"vol_{v.id}.bin", v)
        lines.append(f"volume.{i}={v.id}")
    (path / "index.txt").write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    index = path / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"no dataset index at {index}")
    fields = {}
    for n, line in enumerate(index.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{index}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    version = fields.get("schema_version")
    if version != str(SCHEMA_VERSION):
        raise FormatError(f"{index}: unknown schema version {version!r}")
    try:
        n_classes = int(fields["n_classes"])
        n_volumes = int(fields["n_volumes"])
        ids = [fields[f"volume.{i}"] for i in range(n_volumes)]
    except (KeyError, ValueError) as e:
        raise FormatError(f"{index}: bad or missing field {e}") from None
    return Dataset([_read_volume(path / f"vol_{vid}.bin", vid) for vid in ids], n_classes)


# ---------------------------------------------------------------- splits

def split_dataset(ds, fractions: Sequence[float], seed: int):
    """Random disjoint train/val/test split.

    Sizes use largest-remainder rounding so they always add up to ``len(ds)``.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidFractions(f"fractions must be 3 non-negative values summing to 1, "
                               f"got {fractions}")
    n = len(ds)
    raw = [f * n for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    by_remainder = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    vols = list(ds)
    parts, start = [], 0
    for s in sizes:
        parts.append([vols[j] for j in sorted(order[start:start + s])])
        start += s
    if isinstance(ds, Dataset):
        parts = [ds.subset(p) for p in parts]
    return tuple(parts)


def subsample_labeled(train, fraction: float, seed: int):
    """First ``ceil(fraction * n)`` volumes of a seeded permutation.

    Because the permutation depends on the seed only, smaller fractions give
    subsets of larger ones.
    """
    if not 0 < fraction <= 1:
        raise InvalidFraction(f"labeled fraction must be in (0, 1], got {fraction}")
    n = len(train)
    count = min(n, math.ceil(fraction * n - 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    vols = list(train)
    picked = [vols[j] for j in sorted(order[:count])]
    return train.subset(picked) if isinstance(train, Dataset) else picked
