"""Pre-training losses, projection heads and collapse diagnostics.

Token batches are pairs of tensors ``(B, M, P)``: the rotated-then-restored view
and the masked view, with row ``m`` of both addressing the same spatial location.
All losses L2-normalise embeddings first, so dot products are cosines.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatch, ShapeMismatch

FRAMEWORKS = ("simtrot", "simtrot_w", "btrot", "global_simclr")


@dataclass
class LossConfig:
    tau: float = 0.5
    w: float = 5.0
    symmetrize: bool = True
    proj_dim: int = 32

    def validate(self):
        if not self.tau > 0:
            raise ConfigError(f"loss.tau must be > 0, got {self.tau}")
        if not self.w >= 0:
            raise ConfigError(f"loss.w must be >= 0, got {self.w}")
        if self.proj_dim < 1:
            raise ConfigError("loss.proj_dim must be positive")
        return self


class ProjectionHead(nn.Module):
    """Position-wise two-layer MLP (hidden width twice the input)."""

    def __init__(self, in_dim, out_dim=32, hidden=None):
        super().__init__()
        hidden = hidden or 2 * in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def grid_to_tokens(grid):
    """``(B, C, h, w, d)`` -> ``(B, M, C)`` with ``m`` in row-major grid order."""
    return grid.flatten(2).transpose(1, 2)


def _check_pair(z_rot, z_mask):
    if z_rot.shape != z_mask.shape or z_rot.dim() != 3:
        raise ShapeMismatch(f"token views must both be (B, M, P); got {tuple(z_rot.shape)} "
                            f"and {tuple(z_mask.shape)}")
    B, M, _ = z_rot.shape
    if B * M < 1:
        raise DegenerateBatch("empty token batch")


def _all_tokens(z_rot, z_mask):
    """Normalised tokens stacked view-major: index ``(v * B + i) * M + m``."""
    z = torch.stack([z_rot, z_mask])
    return F.normalize(z, dim=-1).reshape(-1, z.shape[-1])


def token_contrastive_loss(z_rot, z_mask, tau=0.5, symmetrize=True):
    """NT-Xent over every token of the batch.

    Each anchor's positive is the token at the same volume and position in the
    other view; the denominator runs over all other tokens, positive included.
    """
    _check_pair(z_rot, z_mask)
    B, M, _ = z_rot.shape
    N = B * M
    z = _all_tokens(z_rot, z_mask)
    logits = z @ z.T / tau
    eye = torch.eye(2 * N, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    idx = torch.arange(2 * N, device=z.device)
    pos = (idx + N) % (2 * N)
    per_anchor = torch.logsumexp(logits, dim=1) - logits[idx, pos]
    return per_anchor.mean() if symmetrize else per_anchor[:N].mean()


def same_position_weights(B, M, w, dtype=None, device=None):
    """Denominator weights for the weighted loss, ``(2BM, 2BM)``.

    Weight ``w`` on same-position tokens of other volumes (either view), 0 on the
    anchor itself, 1 elsewhere (the positive included).
    """
    N = B * M
    idx = torch.arange(2 * N, device=device)
    vol = (idx % N) // M
    pos = idx % M
    same_pos_other_vol = (pos[:, None] == pos[None, :]) & (vol[:, None] != vol[None, :])
    weights = torch.ones(2 * N, 2 * N, dtype=dtype, device=device)
    weights[same_pos_other_vol] = w
    weights.fill_diagonal_(0.0)
    return weights


def weighted_token_contrastive_loss(z_rot, z_mask, tau=0.5, w=5.0, symmetrize=True):
    """Token contrastive loss with the cross-volume same-position terms of the
    denominator scaled by ``w``. Equals :func:`token_contrastive_loss` at ``w=1``."""
    _check_pair(z_rot, z_mask)
    B, M, _ = z_rot.shape
    N = B * M
    z = _all_tokens(z_rot, z_mask)
    logits = z @ z.T / tau
    weights = same_position_weights(B, M, w, logits.dtype, z.device)
    idx = torch.arange(2 * N, device=z.device)
    pos = (idx + N) % (2 * N)
    per_anchor = torch.logsumexp(logits + torch.log(weights), dim=1) - logits[idx, pos]
    return per_anchor.mean() if symmetrize else per_anchor[:N].mean()


def byol_token_loss(online_pred, target_proj):
    """Mean over tokens of ``||n(p) - n(z)||^2``; the target is detached."""
    if online_pred.shape != target_proj.shape:
        raise ShapeMismatch(f"prediction {tuple(online_pred.shape)} vs target "
                            f"{tuple(target_proj.shape)}")
    p = F.normalize(online_pred, dim=-1)
    z = F.normalize(target_proj.detach(), dim=-1)
    return ((p - z) ** 2).sum(-1).mean()


def global_simclr_loss(e_rot, e_mask, tau=0.5, symmetrize=True):
    """Volume-level NT-Xent on pooled embeddings ``(B, P)``."""
    if e_rot.dim() != 2 or e_rot.shape != e_mask.shape:
        raise ShapeMismatch(f"expected two (B, P) embeddings, got {tuple(e_rot.shape)} "
                            f"and {tuple(e_mask.shape)}")
    if e_rot.shape[0] < 2:
        raise DegenerateBatch("global contrastive loss needs at least 2 volumes")
    return token_contrastive_loss(e_rot[:, None], e_mask[:, None], tau, symmetrize)


# ---------------------------------------------------------------- diagnostics

@dataclass
class CollapseReport:
    cross_volume_cos: float
    within_volume_cos: float
    positive_cos: float
    position_variance: float

    def as_dict(self):
        return {"cross_volume_cos": self.cross_volume_cos,
                "within_volume_cos": self.within_volume_cos,
                "positive_cos": self.positive_cos,
                "position_variance": self.position_variance}


@torch.no_grad()
def collapse_metrics(tokens, other_view=None) -> CollapseReport:
    """Collapse diagnostics for tokens ``(B, M, P)`` of at least two volumes.

    * cross_volume_cos: same position, different volumes
    * within_volume_cos: same volume, different positions
    * positive_cos: same volume and position across views (nan without ``other_view``)
    * position_variance: total variance over volumes of normalised tokens,
      averaged over positions
    """
    tokens = torch.as_tensor(tokens)
    if tokens.dim() != 3 or tokens.shape[0] < 2:
        raise DegenerateBatch("collapse metrics need tokens of shape (B>=2, M, P)")
    B, M, _ = tokens.shape
    z = F.normalize(tokens.double(), dim=-1)

    by_pos = z.transpose(0, 1)                       # (M, B, P)
    g = by_pos @ by_pos.transpose(1, 2)              # (M, B, B)
    cross = (g.sum((1, 2)) - g.diagonal(dim1=1, dim2=2).sum(-1)) / (B * (B - 1))

    if M > 1:
        h = z @ z.transpose(1, 2)                    # (B, M, M)
        within = ((h.sum((1, 2)) - h.diagonal(dim1=1, dim2=2).sum(-1)) / (M * (M - 1))).mean()
    else:
        within = torch.tensor(float("nan"))

    if other_view is not None:
        other = F.normalize(torch.as_tensor(other_view).double(), dim=-1)
        positive = (z * other).sum(-1).mean()
    else:
        positive = torch.tensor(float("nan"))

    variance = by_pos.var(dim=1, unbiased=False).sum(-1).mean()
    return CollapseReport(float(cross.mean()), float(within), float(positive), float(variance))
