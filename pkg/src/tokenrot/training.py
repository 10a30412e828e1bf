"""Pre-training loops, segmentation fine-tuning and ablation grids."""
from __future__ import annotations

import copy
import itertools
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .augmentation import make_view_pair, texture_augment, block_mask
from .config import RunConfig, copy_config, dump_config, set_value, format_value
from .encoder import EncoderConfig, TokenEncoder, ema_update
from .errors import (CheckpointMismatch, ConfigError, DataError, EmptyLabeledSet,
                     NonFiniteLoss)
from .metrics import evaluate_segmentation
from .numeric import torch_dtype
from .objectives import (ProjectionHead, byol_token_loss, collapse_metrics, global_simclr_loss,
                         grid_to_tokens, token_contrastive_loss, weighted_token_contrastive_loss)
from .records import CONFIG, RunRecord
from .spatial_group import IDENTITY, apply_to_volume, restore_token_grid, sample_valid_transform
from .synthetic_data import Dataset, load_dataset, split_dataset, subsample_labeled

log = logging.getLogger(__name__)

#: seed offset of the fixed view pairs used for collapse diagnostics
_DIAG_SEED = 10_007


def poly_lr(base_lr, step, total, exponent):
    if exponent == 0 or total <= 0:
        return base_lr
    return base_lr * (1.0 - step / total) ** exponent


def _stack(volumes, dtype):
    return torch.from_numpy(np.stack([v.intensities for v in volumes])).to(dtype)


def _check_dataset(ds: Dataset, enc: EncoderConfig):
    for v in ds:
        if v.shape != tuple(enc.input_shape) or v.n_channels != enc.in_channels:
            raise DataError(f"volume {v.id}: shape {v.intensities.shape} does not match encoder "
                            f"input {(enc.in_channels, *enc.input_shape)}")


def _resolve_dataset(cfg: RunConfig, dataset):
    ds = dataset if dataset is not None else load_dataset(cfg.dataset)
    _check_dataset(ds, cfg.encoder)
    return ds


def _schedule(cfg: RunConfig, n_items):
    """``(total_steps, epochs)``; ``cfg.max_steps`` overrides the epoch count."""
    per_epoch = math.ceil(n_items / cfg.batch_size)
    if cfg.max_steps:
        return cfg.max_steps, math.ceil(cfg.max_steps / per_epoch)
    return per_epoch * cfg.epochs, cfg.epochs


def _batches(n, batch_size, epochs, rng):
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, order[start:start + batch_size]


# ---------------------------------------------------------------- pre-training

class PretrainState:
    """Online encoder and heads (plus the EMA target for B-TROT)."""

    def __init__(self, cfg: RunConfig):
        dtype = torch_dtype()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = TokenEncoder(cfg.encoder).to(dtype)
        out = cfg.encoder.out_dim
        self.proj = ProjectionHead(out, cfg.loss.proj_dim).to(dtype)
        self.pred = None
        self.target_encoder = self.target_proj = None
        if cfg.framework == "btrot":
            self.pred = ProjectionHead(cfg.loss.proj_dim, cfg.loss.proj_dim).to(dtype)
            self.target_encoder = copy.deepcopy(self.encoder).requires_grad_(False)
            self.target_proj = copy.deepcopy(self.proj).requires_grad_(False)

    def online_modules(self):
        mods = {"encoder": self.encoder, "proj": self.proj}
        if self.pred is not None:
            mods["pred"] = self.pred
        return mods

    def all_modules(self):
        mods = self.online_modules()
        if self.target_encoder is not None:
            mods["target_encoder"] = self.target_encoder
            mods["target_proj"] = self.target_proj
        return mods

    def online_parameters(self):
        return [p for m in self.online_modules().values() for p in m.parameters()]

    def tensors(self):
        out = {}
        for prefix, m in self.all_modules().items():
            out.update(ckpt.module_tensors(m, prefix))
        return {k: v.detach().clone() for k, v in out.items()}

    def ema_step(self):
        if self.target_encoder is not None:
            m = self.cfg.optim.ema_momentum
            ema_update(self.target_encoder, self.encoder, m)
            ema_update(self.target_proj, self.proj, m)


def _restore_batch(grids, transforms):
    if all(t == IDENTITY for t in transforms):
        return grids
    return torch.stack([restore_token_grid(g, t) for g, t in zip(grids, transforms)])


def build_view_batch(volumes, cfg: RunConfig, rng):
    patches = cfg.encoder.receptive_patches()
    return [make_view_pair(v, cfg.aug, patches, rng) for v in volumes]


def pretrain_loss(state: PretrainState, pairs):
    """Loss of one batch of view pairs under the configured framework."""
    cfg = state.cfg
    x_rot = _stack([p.view_rotated for p in pairs], state.dtype)
    x_mask = _stack([p.view_masked for p in pairs], state.dtype)
    transforms = [p.transform for p in pairs]
    tau, sym = cfg.loss.tau, cfg.loss.symmetrize

    if cfg.framework == "btrot":
        p_rot = state.pred(state.proj(grid_to_tokens(
            _restore_batch(state.encoder(x_rot), transforms))))
        with torch.no_grad():
            t_mask = state.target_proj(grid_to_tokens(state.target_encoder(x_mask)))
        loss = byol_token_loss(p_rot, t_mask)
        if sym:
            p_mask = state.pred(state.proj(grid_to_tokens(state.encoder(x_mask))))
            with torch.no_grad():
                t_rot = state.target_proj(grid_to_tokens(
                    _restore_batch(state.target_encoder(x_rot), transforms)))
            loss = loss + byol_token_loss(p_mask, t_rot)
        return loss

    g_rot = _restore_batch(state.encoder(x_rot), transforms)
    g_mask = state.encoder(x_mask)
    if cfg.framework == "global_simclr":
        e_rot = state.proj(g_rot.mean(dim=(2, 3, 4)))
        e_mask = state.proj(g_mask.mean(dim=(2, 3, 4)))
        return global_simclr_loss(e_rot, e_mask, tau, sym)
    z_rot = state.proj(grid_to_tokens(g_rot))
    z_mask = state.proj(grid_to_tokens(g_mask))
    if cfg.framework == "simtrot_w":
        return weighted_token_contrastive_loss(z_rot, z_mask, tau, cfg.loss.w, sym)
    return token_contrastive_loss(z_rot, z_mask, tau, sym)


@torch.no_grad()
def diagnose_tokens(encoder, proj, volumes, cfg: RunConfig, dtype=None):
    """Collapse reports for clean volumes (projected and raw encoder tokens).

    The positive-pair cosine compares each clean volume with a fixed masked and
    texture-augmented copy of itself.
    """
    dtype = dtype or next(encoder.parameters()).dtype
    rng = np.random.default_rng(cfg.seed + _DIAG_SEED)
    block = cfg.aug.mask_block or cfg.encoder.patch_size
    masked = []
    for v in volumes:
        aug = texture_augment(v, cfg.aug, rng)
        ratio = cfg.aug.mask_ratio if cfg.aug.mask_enabled else 0.0
        masked.append(block_mask(aug, ratio, block, rng)[0])
    g_clean = encoder(_stack(volumes, dtype))
    g_mask = encoder(_stack(masked, dtype))
    reports = {"enc.": collapse_metrics(grid_to_tokens(g_clean), grid_to_tokens(g_mask))}
    if proj is not None:
        reports["proj."] = collapse_metrics(proj(grid_to_tokens(g_clean)),
                                            proj(grid_to_tokens(g_mask)))
    return reports


def _run_dir_checkpoint(out_dir, name, tensors, cfg, meta):
    if out_dir is None:
        return None
    path = Path(out_dir) / "checkpoints" / name
    ckpt.save_checkpoint(path, tensors, {"run": dump_config(cfg),
                                         "encoder": cfg.encoder.to_dict()}, meta)
    return str(path.relative_to(out_dir))


def _write_config(out_dir, cfg):
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / CONFIG).write_text(dump_config(cfg))


def pretrain(cfg: RunConfig, dataset: Optional[Dataset] = None, out_dir=None) -> RunRecord:
    """Self-supervised pre-training on the training split.

    Returns the run record; ``record.tensors`` holds the final state and, when
    ``out_dir`` is given, records and checkpoints are written there.
    """
    cfg.validate()
    ds = _resolve_dataset(cfg, dataset)
    train, _, _ = split_dataset(ds, cfg.split, cfg.split_seed)
    if len(train) == 0:
        raise DataError("training split is empty")
    _write_config(out_dir, cfg)
    state = PretrainState(cfg)
    params = state.online_parameters()
    opt = torch.optim.SGD(params, lr=cfg.optim.lr, momentum=cfg.optim.momentum,
                          nesterov=cfg.optim.nesterov and cfg.optim.momentum > 0,
                          weight_decay=cfg.optim.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    total, epochs = _schedule(cfg, len(train))
    diag_vols = list(train)[:min(cfg.n_diag_volumes, len(train))]
    rec = RunRecord(kind="pretrain")
    t0 = time.perf_counter()
    meta = {"framework": cfg.framework, "kind": "pretrain"}
    last = {}

    def diagnose(step):
        if len(diag_vols) >= 2:
            for prefix, rep in diagnose_tokens(state.encoder, state.proj, diag_vols, cfg,
                                               state.dtype).items():
                rec.log_collapse(step, rep, prefix)
                last.update({prefix + k: v for k, v in rep.as_dict().items()})

    step = 0
    for epoch, idx in _batches(len(train), cfg.batch_size, epochs, rng):
        if step >= total:
            break
        lr = poly_lr(cfg.optim.lr, step, total, cfg.optim.poly_exponent)
        for group in opt.param_groups:
            group["lr"] = lr
        pairs = build_view_batch([train[int(i)] for i in idx], cfg, rng)
        loss = pretrain_loss(state, pairs)
        if not torch.isfinite(loss):
            where = _run_dir_checkpoint(out_dir, "last_good.ckpt", state.tensors(), cfg,
                                        dict(meta, step=step))
            if out_dir is not None:
                rec.write(out_dir)
            raise NonFiniteLoss(step, where)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.ema_step()
        rec.log_step(step, time.perf_counter() - t0, epoch=epoch, loss=float(loss.detach()), lr=lr,
                     transforms=[p.transform.to_ints() for p in pairs])
        step += 1
        if cfg.eval_every and step % cfg.eval_every == 0 and step < total:
            diagnose(step)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < total:
            _run_dir_checkpoint(out_dir, f"step_{step:06d}.ckpt", state.tensors(), cfg,
                                dict(meta, step=step))
    diagnose(step)
    rec.tensors = state.tensors()
    rec.checkpoint = _run_dir_checkpoint(out_dir, "final.ckpt", rec.tensors, cfg,
                                         dict(meta, step=step))
    losses = rec.losses()
    rec.summary = {"framework": cfg.framework, "steps": step, "final_loss": losses[-1],
                   "first_loss": losses[0], "config_digest": cfg.digest(),
                   **{k: v for k, v in sorted(last.items())}}
    if out_dir is not None:
        rec.write(out_dir)
    return rec


# ---------------------------------------------------------------- fine-tuning

class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv3d(cin, cout, 3, padding=1), nn.InstanceNorm3d(cout, affine=True),
                         nn.LeakyReLU(0.01))


class UNetDecoder(nn.Module):
    """Convolutional U-shaped decoder over the encoder's stage outputs.

    Each stage's token grid is upsampled by transposed convolution to the next
    finer stage and fused with its skip; the finest grid is upsampled to voxel
    resolution and fused with a convolutional stem of the raw input.
    """

    def __init__(self, enc: EncoderConfig, n_outputs: int):
        super().__init__()
        shapes = enc.token_shapes()
        dims = list(enc.embed_dims)
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for s in range(len(dims) - 1, 0, -1):
            ratio = tuple(a // b for a, b in zip(shapes[s - 1], shapes[s]))
            self.ups.append(nn.ConvTranspose3d(dims[s], dims[s - 1], ratio, stride=ratio))
            self.fuse.append(ConvBlock(2 * dims[s - 1], dims[s - 1]))
        c0 = max(8, dims[0] // 2)
        self.stem = ConvBlock(enc.in_channels, c0)
        self.up_final = nn.ConvTranspose3d(dims[0], c0, enc.patch_size, stride=enc.patch_size)
        self.fuse_final = ConvBlock(2 * c0, c0)
        self.head = nn.Conv3d(c0, n_outputs, 1)

    def forward(self, x, features: Sequence[torch.Tensor]):
        y = features[-1]
        for i, (up, fuse) in enumerate(zip(self.ups, self.fuse)):
            skip = features[-2 - i]
            y = fuse(torch.cat([up(y), skip], dim=1))
        y = self.fuse_final(torch.cat([self.up_final(y), self.stem(x)], dim=1))
        return self.head(y)


class SegmentationModel(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, n_classes: int):
        super().__init__()
        self.encoder = TokenEncoder(enc_cfg)
        self.decoder = UNetDecoder(enc_cfg, n_classes + 1)

    def forward(self, x):
        return self.decoder(x, self.encoder.forward_features(x))


def soft_dice_loss(logits, target, n_outputs, eps=1e-5):
    """1 - mean soft Dice over foreground classes."""
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, n_outputs).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def segmentation_loss(logits, target, n_outputs):
    return F.cross_entropy(logits, target) + soft_dice_loss(logits, target, n_outputs)


def _load_pretrained(model: SegmentationModel, pretrained, enc_cfg: EncoderConfig):
    if isinstance(pretrained, (str, Path)):
        tensors, config, _ = ckpt.load_checkpoint(pretrained)
        saved = config.get("encoder")
        if saved is not None:
            current = enc_cfg.to_dict()
            norm = {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in current.items()}
            if {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in saved.items()} != norm:
                raise CheckpointMismatch(f"checkpoint encoder config {saved} != run config {current}")
    else:
        tensors = pretrained
    ckpt.load_into(model.encoder, tensors, "encoder")


@torch.no_grad()
def predict(model, volumes, dtype):
    model.eval()
    out = []
    for v in volumes:
        logits = model(_stack([v], dtype))
        out.append(logits.argmax(1)[0].numpy())
    model.train()
    return out


def evaluate(model, volumes, n_classes, dtype, rec: RunRecord = None, step=0):
    preds = predict(model, volumes, dtype)
    dices, hds = [], []
    per_class = {k: [] for k in range(1, n_classes + 1)}
    for v, p in zip(volumes, preds):
        res = evaluate_segmentation(p, v.label, range(1, n_classes + 1), v.spacing)
        for k in res.dice:
            if rec is not None:
                rec.log_eval(step, v.id, k, res.dice[k], res.hd95[k])
            per_class[k].append(res.dice[k])
            dices.append(res.dice[k])
            if math.isfinite(res.hd95[k]):
                hds.append(res.hd95[k])
    return {"dice": float(np.mean(dices)) if dices else float("nan"),
            "hd95": float(np.mean(hds)) if hds else float("inf"),
            "dice_per_class": {str(k): float(np.mean(v)) for k, v in per_class.items() if v}}


def finetune(cfg: RunConfig, pretrained=None, dataset: Optional[Dataset] = None, out_dir=None,
             max_steps: Optional[int] = None) -> RunRecord:
    """Supervised segmentation training with a U-shaped decoder.

    ``pretrained`` is a checkpoint path, a name->tensor dict, or None (scratch;
    also taken from ``cfg.pretrained`` when that is set). ``max_steps``, when
    given, replaces ``cfg.max_steps``.
    """
    if max_steps is not None:
        cfg = copy_config(cfg)
        cfg.max_steps = max_steps
    cfg.validate()
    if pretrained is None and cfg.pretrained:
        pretrained = cfg.pretrained
    ds = _resolve_dataset(cfg, dataset)
    train, _, test = split_dataset(ds, cfg.split, cfg.split_seed)
    if len(train) == 0:
        raise EmptyLabeledSet("training split is empty")
    labeled = subsample_labeled(train, cfg.labeled_fraction, cfg.split_seed)
    if any(v.label is None for v in labeled):
        raise EmptyLabeledSet("labeled subset contains volumes without labels")
    eval_set = test if len(test) else train
    _write_config(out_dir, cfg)

    dtype = torch_dtype()
    torch.manual_seed(cfg.seed)
    model = SegmentationModel(cfg.encoder, ds.n_classes).to(dtype)
    if pretrained is not None:
        _load_pretrained(model, pretrained, cfg.encoder)
    n_out = ds.n_classes + 1
    opt = torch.optim.SGD(model.parameters(), lr=cfg.optim.lr, momentum=cfg.optim.momentum,
                          nesterov=cfg.optim.nesterov and cfg.optim.momentum > 0,
                          weight_decay=cfg.optim.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    total, epochs = _schedule(cfg, len(labeled))
    patches = cfg.encoder.receptive_patches()
    rec = RunRecord(kind="finetune")
    t0 = time.perf_counter()
    scores = {}
    step = 0
    for epoch, idx in _batches(len(labeled), cfg.batch_size, epochs, rng):
        if step >= total:
            break
        lr = poly_lr(cfg.optim.lr, step, total, cfg.optim.poly_exponent)
        for group in opt.param_groups:
            group["lr"] = lr
        vols = []
        for i in idx:
            v = labeled[int(i)]
            if cfg.aug.spatial_enabled:
                v = apply_to_volume(v, sample_valid_transform(v.shape, patches, rng))
            vols.append(v)
        x = _stack(vols, dtype)
        y = torch.from_numpy(np.stack([v.label for v in vols]).astype(np.int64))
        loss = segmentation_loss(model(x), y, n_out)
        if not torch.isfinite(loss):
            tensors = ckpt.module_tensors(model, "model")
            where = _run_dir_checkpoint(out_dir, "last_good.ckpt", tensors, cfg, {"step": step})
            raise NonFiniteLoss(step, where)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec.log_step(step, time.perf_counter() - t0, epoch=epoch, loss=float(loss.detach()), lr=lr)
        step += 1
        if cfg.eval_every and step % cfg.eval_every == 0 and step < total:
            evaluate(model, eval_set, ds.n_classes, dtype, rec, step)
    scores = evaluate(model, eval_set, ds.n_classes, dtype, rec, step)
    tensors = {**ckpt.module_tensors(model.encoder, "encoder"),
               **ckpt.module_tensors(model.decoder, "decoder")}
    rec.tensors = {k: v.detach().clone() for k, v in tensors.items()}
    rec.checkpoint = _run_dir_checkpoint(out_dir, "final.ckpt", rec.tensors, cfg,
                                         {"kind": "finetune", "step": step})
    losses = rec.losses()
    rec.summary = {"framework": cfg.framework if pretrained is not None else "scratch",
                   "pretrained": pretrained is not None, "steps": step,
                   "labeled_fraction": cfg.labeled_fraction, "n_labeled": len(labeled),
                   "first_loss": losses[0], "final_loss": losses[-1],
                   "config_digest": cfg.digest(), **scores}
    if out_dir is not None:
        rec.write(out_dir)
    return rec


# ---------------------------------------------------------------- ablations

ABLATION_KEYS = ("framework", "aug.mask_enabled", "aug.spatial_enabled", "loss.w",
                 "aug.mask_ratio")


def ablation_points(axes: Dict[str, Sequence]):
    """Grid points as lists of ``(key, text_value)`` pairs, in axis order."""
    for key in axes:
        if key not in ABLATION_KEYS:
            raise ConfigError(f"cannot ablate {key!r}; allowed axes: {ABLATION_KEYS}")
    keys = list(axes)
    values = [[v if isinstance(v, str) else format_value(v) for v in axes[k]] for k in keys]
    for combo in itertools.product(*values):
        yield list(zip(keys, combo))


def run_ablation_grid(base: RunConfig, axes: Dict[str, Sequence], runner):
    """Run ``runner(cfg, name)`` once per grid point; all points share the seed.

    Returns ``[(name, overrides, result)]``. Empty ``axes`` runs the base config once.
    """
    results = []
    for point in ablation_points(axes):
        cfg = copy_config(base)
        for k, v in point:
            set_value(cfg, k, v)
        cfg.validate()
        name = "base" if not point else "_".join(f"{k.split('.')[-1]}={v}" for k, v in point)
        results.append((name, dict(point), runner(cfg, name)))
    return results


def ablation_table(results, metrics: Sequence[str]):
    rows = []
    for name, point, rec in results:
        summary = rec.summary if isinstance(rec, RunRecord) else rec
        rows.append({"run": name, **point, **{m: summary.get(m) for m in metrics}})
    return rows
