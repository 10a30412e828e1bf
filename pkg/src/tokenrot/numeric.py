"""Process-wide numeric precision.

``TOKENROT_PRECISION=64`` switches every model and loss to float64 (used for
gradient checks and bit-level determinism tests); the default is 32.
"""
import os

import torch

ENV_VAR = "TOKENROT_PRECISION"


def precision_bits():
    value = os.environ.get(ENV_VAR, "32").strip()
    if value not in ("32", "64"):
        raise ValueError(f"{ENV_VAR} must be 32 or 64, got {value!r}")
    return int(value)


def torch_dtype():
    return torch.float64 if precision_bits() == 64 else torch.float32
