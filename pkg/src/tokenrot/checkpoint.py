"""Self-describing checkpoint archive.

Layout: ``MAGIC`` (8 bytes), schema version (u32 LE), header length (u64 LE),
a UTF-8 JSON header, then the raw little-endian tensor bytes in header order.
The header holds the schema version, a free-form ``config`` and ``meta`` dict,
and one ``{name, dtype, shape, offset, nbytes}`` entry per tensor.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch

from .errors import CheckpointMismatch, FormatError

MAGIC = b"TROTCKPT"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f4": torch.float32, "f8": torch.float64, "i8": torch.int64, "i4": torch.int32}


def _to_numpy(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    a = np.asarray(t)
    code = a.dtype.kind + str(a.dtype.itemsize)
    if code not in _DTYPES:
        raise FormatError(f"unsupported tensor dtype {a.dtype}")
    return np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<"), copy=False)), code


def save_checkpoint(path, tensors: Mapping[str, object], config=None, meta=None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        a, code = _to_numpy(t)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"schema_version": SCHEMA_VERSION, "config": config or {},
                         "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, SCHEMA_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    return path


def load_checkpoint(path):
    """Return ``(tensors, config, meta)``; tensors is an ordered name->Tensor dict."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: unknown schema version {version}")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    base = _PREFIX.size + hlen
    tensors: Dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        dt = np.dtype("<" + e["dtype"])
        start = base + e["offset"]
        if start + e["nbytes"] > len(data) or e["nbytes"] != dt.itemsize * int(np.prod(e["shape"])):
            raise FormatError(f"{path}: tensor {e['name']!r} is truncated or inconsistent")
        a = np.frombuffer(data, dt, int(np.prod(e["shape"])), start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.astype(dt.newbyteorder("="), copy=True))
    return tensors, header["config"], header["meta"]


def module_tensors(module: torch.nn.Module, prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str):
    """Copy ``prefix.*`` tensors into ``module``, validating names and shapes."""
    own = module.state_dict()
    given = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if set(own) != set(given):
        diff = sorted(set(own) ^ set(given))
        raise CheckpointMismatch(f"{prefix}: parameter names differ, e.g. {diff[:5]}")
    for k, v in given.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointMismatch(f"{prefix}.{k}: checkpoint shape {tuple(v.shape)} "
                                     f"!= model shape {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in given.items()})
    return module
