import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tokenrot.encoder import (EncoderConfig, PatchEmbed, PatchMerging, TransformerBlock,
                              build_encoder, ema_update, expected_parameter_count,
                              shifted_window_mask, window_partition, window_reverse)
from tokenrot.errors import KeyMismatch, OddShape, ShapeMismatch, WindowMismatch
from tokenrot.objectives import grid_to_tokens, weighted_token_contrastive_loss
from tokenrot.spatial_group import apply_to_grid, valid_transforms

torch.set_default_dtype(torch.float32)


def mean_embed(patch=(2, 2, 2), grid=(2, 2, 2), dim=1):
    pe = PatchEmbed(1, dim, patch, grid, norm=False).double()
    with torch.no_grad():
        pe.proj.weight.fill_(1.0 / math.prod(patch))
        pe.proj.bias.zero_()
    return pe


def small_cfg(**kw):
    base = dict(input_shape=(8, 8, 8), patch_size=(2, 2, 2), n_stages=2, embed_dims=(8, 16),
                n_heads=(2, 2), window_size=(2, 2, 2))
    base.update(kw)
    return EncoderConfig(**base)


def test_mean_projection_gives_block_means():
    pe = mean_embed()
    with torch.no_grad():
        pe.pos_embed.zero_()
    x = torch.arange(64, dtype=torch.float64).view(1, 1, 4, 4, 4)
    out = pe(x)[0, 0]
    for i in range(2):
        for j in range(2):
            for k in range(2):
                block = x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
                assert out[i, j, k].item() == pytest.approx(block.mean().item(), abs=1e-12)


def test_zero_volume_gives_positional_embedding():
    pe = PatchEmbed(1, 6, (2, 2, 2), (2, 2, 2), norm=False)
    with torch.no_grad():
        pe.proj.bias.zero_()
    out = pe(torch.zeros(3, 1, 4, 4, 4))
    for b in range(3):
        assert torch.equal(out[b], pe.pos_embed[0])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_partition_commutes_with_transforms(seed):
    pe = mean_embed(grid=(4, 4, 2))
    with torch.no_grad():
        pe.pos_embed.zero_()
    x = torch.from_numpy(np.random.default_rng(seed).random((1, 1, 8, 8, 4)))
    base = pe(x)
    for t in valid_transforms((8, 8, 4), [(2, 2, 2)]):
        got = pe.__class__.forward(_regrid(pe, t), apply_to_grid(x, t))
        torch.testing.assert_close(got, apply_to_grid(base, t), rtol=0, atol=1e-12)


def _regrid(pe, t):
    """Same patch embed with a positional table shaped for the transformed grid."""
    out = copy.deepcopy(pe)
    out.pos_embed = torch.nn.Parameter(apply_to_grid(pe.pos_embed.detach(), t))
    return out


def _layer_norm(v, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) for a in v]


def _gelu(a):
    return 0.5 * a * (1 + math.erf(a / math.sqrt(2)))


def test_degenerate_forward_by_hand():
    cfg = EncoderConfig(input_shape=(2, 2, 2), patch_size=(2, 2, 2), n_stages=1,
                        blocks_per_stage=1, embed_dims=(4,), n_heads=(1,), window_size=(1, 1, 1),
                        patch_norm=False, output_norm=False, standardize_input=False)
    enc = build_encoder(cfg, seed=0, dtype=torch.float64)
    block = enc.stages[0][0]
    with torch.no_grad():
        # uniform attention over one token and identity value/output maps
        block.attn.qkv.weight.zero_()
        block.attn.qkv.weight[8:12] = torch.eye(4)
        block.attn.qkv.bias.zero_()
        block.attn.proj.weight.copy_(torch.eye(4))
        block.attn.proj.bias.zero_()
    x = torch.from_numpy(np.random.default_rng(0).random((1, 1, 2, 2, 2)))
    out = enc(x)[0, :, 0, 0, 0].tolist()

    W = enc.patch_embed.proj.weight.detach().view(4, 8).tolist()
    b = enc.patch_embed.proj.bias.detach().tolist()
    pos = enc.patch_embed.pos_embed.detach().view(4).tolist()
    vox = x.view(8).tolist()
    tok = [sum(W[c][i] * vox[i] for i in range(8)) + b[c] + pos[c] for c in range(4)]
    # attention sublayer returns the normalised token itself
    tok = [a + n for a, n in zip(tok, _layer_norm(tok))]
    mlp = block.mlp
    f1w, f1b = mlp.fc1.weight.detach().tolist(), mlp.fc1.bias.detach().tolist()
    f2w, f2b = mlp.fc2.weight.detach().tolist(), mlp.fc2.bias.detach().tolist()
    n = _layer_norm(tok)
    hidden = [_gelu(sum(f1w[h][c] * n[c] for c in range(4)) + f1b[h]) for h in range(8)]
    expected = [tok[c] + sum(f2w[c][h] * hidden[h] for h in range(8)) + f2b[c] for c in range(4)]
    assert out == pytest.approx(expected, abs=1e-12)


def test_determinism_and_shapes():
    cfg = EncoderConfig()
    enc = build_encoder(cfg, seed=0)
    x = torch.rand(1, 1, 32, 32, 32)
    feats = enc.forward_features(torch.cat([x, x]))
    assert [tuple(f.shape) for f in feats] == [(2, 16, 16, 16, 16), (2, 32, 8, 8, 8),
                                               (2, 64, 4, 4, 4)]
    assert torch.equal(feats[-1][0], feats[-1][1])
    assert cfg.token_shapes()[-1] == (4, 4, 4)


@pytest.mark.parametrize("cfg", [EncoderConfig(), EncoderConfig.flat(), small_cfg(),
                                 small_cfg(patch_norm=False, output_norm=False)])
def test_parameter_count_audit(cfg):
    enc = build_encoder(cfg, seed=0)
    assert sum(p.numel() for p in enc.parameters()) == expected_parameter_count(cfg)
    feats = enc.forward_features(torch.rand(1, cfg.in_channels, *cfg.input_shape))
    for f, dim, grid in zip(feats, cfg.embed_dims, cfg.token_shapes()):
        assert tuple(f.shape) == (1, dim) + grid


def test_flat_variant_keeps_grid():
    cfg = EncoderConfig.flat()
    out = build_encoder(cfg, seed=0)(torch.rand(1, 1, 32, 32, 32))
    assert tuple(out.shape) == (1, 48, 4, 4, 4)


def test_config_errors():
    with pytest.raises(ShapeMismatch):
        EncoderConfig(input_shape=(30, 32, 32)).validate()
    with pytest.raises(WindowMismatch):
        EncoderConfig(window_size=(3, 3, 3)).validate()
    enc = build_encoder(small_cfg(), seed=0)
    with pytest.raises(ShapeMismatch):
        enc(torch.rand(1, 1, 8, 8, 9))


def test_merge_shape_and_constant():
    m = PatchMerging(8)
    assert tuple(m(torch.rand(1, 2, 2, 2, 8)).shape) == (1, 1, 1, 1, 16)
    with torch.no_grad():
        m.reduction.weight.zero_()
        for k in range(2):
            m.reduction.weight[k * 8:(k + 1) * 8, :8] = torch.eye(8)
    const = torch.full((1, 4, 4, 2, 8), 0.3)
    torch.testing.assert_close(m(const), torch.full((1, 2, 2, 1, 16), 0.3))
    with pytest.raises(OddShape):
        m(torch.rand(1, 3, 2, 2, 8))


def test_merge_matches_gather_concat_oracle():
    C = 3
    m = PatchMerging(C).double()
    x = torch.zeros(1, 4, 2, 6, C, dtype=torch.float64)
    for i in range(4):
        for j in range(2):
            for k in range(6):
                for c in range(C):
                    x[0, i, j, k, c] = 1000 * i + 100 * j + 10 * k + c
    out = m(x)
    W = m.reduction.weight.detach().numpy()
    xn = x.numpy()
    for I in range(2):
        for J in range(1):
            for K in range(3):
                cat = np.concatenate([xn[0, 2 * I + a, 2 * J + b, 2 * K + c]
                                      for a in (0, 1) for b in (0, 1) for c in (0, 1)])
                np.testing.assert_allclose(out[0, I, J, K].detach().numpy(), W @ cat, rtol=1e-12)


def dense_block_oracle(block, x):
    """Plain global multi-head self-attention block on flattened tokens (numpy)."""
    p = {k: v.detach().numpy() for k, v in block.state_dict().items()}
    B, D, H, W, C = x.shape
    t = x.detach().numpy().reshape(B, -1, C)

    def ln(a, g, b):
        mu = a.mean(-1, keepdims=True)
        var = a.var(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * g + b

    h = ln(t, p["norm1.weight"], p["norm1.bias"])
    qkv = h @ p["attn.qkv.weight"].T + p["attn.qkv.bias"]
    q, k, v = np.split(qkv, 3, axis=-1)
    nh = block.attn.n_heads
    hd = C // nh
    heads = []
    for n in range(nh):
        s = slice(n * hd, (n + 1) * hd)
        a = q[..., s] @ k[..., s].transpose(0, 2, 1) / math.sqrt(hd)
        a = np.exp(a - a.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        heads.append(a @ v[..., s])
    att = np.concatenate(heads, -1) @ p["attn.proj.weight"].T + p["attn.proj.bias"]
    t = t + att
    h = ln(t, p["norm2.weight"], p["norm2.bias"])
    u = h @ p["mlp.fc1.weight"].T + p["mlp.fc1.bias"]
    u = 0.5 * u * (1 + np.vectorize(math.erf)(u / math.sqrt(2)))
    t = t + u @ p["mlp.fc2.weight"].T + p["mlp.fc2.bias"]
    return t.reshape(B, D, H, W, C)


def test_full_window_equals_dense_attention():
    torch.manual_seed(0)
    block = TransformerBlock(8, 2, (2, 4, 2), (2, 4, 2)).double()
    for prm in block.parameters():
        torch.nn.init.normal_(prm, std=0.3)
    x = torch.randn(2, 2, 4, 2, 8, dtype=torch.float64)
    np.testing.assert_allclose(block(x).detach().numpy(), dense_block_oracle(block, x), atol=1e-5)


def test_windows_share_weights():
    block = TransformerBlock(8, 2, (4, 2, 2), (2, 2, 2))
    half = torch.randn(1, 2, 2, 2, 8)
    out = block(torch.cat([half, half], dim=1))
    torch.testing.assert_close(out[:, :2], out[:, 2:], rtol=0, atol=0)


def test_roll_inverse_and_partition_round_trip():
    x = torch.arange(4 * 4 * 4 * 2, dtype=torch.float32).view(1, 4, 4, 4, 2)
    s = (2, 2, 2)
    back = torch.roll(torch.roll(x, tuple(-a for a in s), (1, 2, 3)), s, (1, 2, 3))
    assert torch.equal(back, x)
    w = window_partition(x, (2, 2, 2))
    assert torch.equal(window_reverse(w, (2, 2, 2), (4, 4, 4)), x)


def test_shift_mask_blocks_wrapped_neighbours():
    mask = shifted_window_mask((4, 4, 4), (2, 2, 2), (1, 1, 1))
    assert mask.shape == (8, 8, 8)
    # the first window never wraps, the last one mixes 8 regions
    assert torch.all(mask[0] == 0)
    assert int(torch.isinf(mask[-1]).sum()) == 8 * 7


def test_ema_cases():
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    t = copy.deepcopy(a)
    ema_update(t, b, 1.0)
    assert torch.equal(t.weight, a.weight)
    ema_update(t, b, 0.0)
    assert torch.equal(t.weight, b.weight) and torch.equal(t.bias, b.bias)
    with pytest.raises(KeyMismatch):
        ema_update(t, torch.nn.Linear(3, 3), 0.5)
    with pytest.raises(KeyMismatch):
        ema_update(t, torch.nn.Conv1d(3, 2, 1), 0.5)


def test_ema_closed_form():
    target = {"p": torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)}
    online = {"p": torch.tensor([3.0, 4.0, -1.0], dtype=torch.float64)}
    t0 = target["p"].clone()
    m, k = 0.9, 5
    for _ in range(k):
        ema_update(target, online, m)
    expected = m ** k * t0 + (1 - m ** k) * online["p"]
    assert torch.max(torch.abs(target["p"] - expected)).item() < 1e-9


def test_gradient_check_encoder_plus_loss(float64):
    cfg = small_cfg(blocks_per_stage=2)
    enc = build_encoder(cfg, seed=0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    x1 = torch.rand(2, 1, 8, 8, 8, generator=gen, dtype=torch.float64)
    x2 = torch.rand(2, 1, 8, 8, 8, generator=gen, dtype=torch.float64)

    def loss_fn():
        return weighted_token_contrastive_loss(grid_to_tokens(enc(x1)), grid_to_tokens(enc(x2)),
                                               0.5, 5.0)

    loss_fn().backward()
    # the stage-0 output norm only feeds decoder skips
    params = [(n, p) for n, p in enc.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(60):
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + 1e-5
            up = loss_fn().item()
            p[idx] = old - 1e-5
            down = loss_fn().item()
            p[idx] = old
        numeric = (up - down) / 2e-5
        scale = max(abs(analytic), abs(numeric), 1e-6)
        assert abs(analytic - numeric) / scale < 1e-4, (name, idx, analytic, numeric)
        checked += 1
    assert checked >= 50


def test_repeat_calls_bit_identical(float64):
    enc = build_encoder(small_cfg(), seed=3, dtype=torch.float64)
    x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
    assert torch.equal(enc(x), enc(x))
