import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference, nt_xent_brute, weighted_brute
from tokenrot.errors import DegenerateBatch, ShapeMismatch
from tokenrot.objectives import (ProjectionHead, byol_token_loss, collapse_metrics,
                                 global_simclr_loss, token_contrastive_loss,
                                 weighted_token_contrastive_loss)


def rand_pair(rng, B, M, P=5):
    return (torch.from_numpy(rng.normal(size=(B, M, P))),
            torch.from_numpy(rng.normal(size=(B, M, P))))


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return torch.from_numpy(q * np.sign(np.diag(r)))


def test_single_pair_is_zero(rng):
    a, b = rand_pair(rng, 1, 1)
    assert token_contrastive_loss(a, b).item() == pytest.approx(0.0, abs=1e-12)


def test_orthonormal_case():
    e = torch.eye(4, dtype=torch.float64)
    z_rot, z_mask = e[None, :2], e[None, 2:]
    expected = math.log(1 + 2 * math.exp(-2))
    assert expected == pytest.approx(0.2395, abs=5e-5)
    # positives orthogonal too: numerator e^0, denominator 3 e^0
    assert token_contrastive_loss(z_rot, z_mask).item() == pytest.approx(math.log(3), abs=1e-12)
    assert nt_xent_brute(z_rot.numpy(), z_mask.numpy(), 0.5) == pytest.approx(math.log(3))
    # positives aligned, every other pair orthogonal
    z_rot = e[None, :2]
    got = token_contrastive_loss(z_rot, z_rot.clone()).item()
    brute = nt_xent_brute(z_rot.numpy(), z_rot.numpy(), 0.5)
    # each anchor sees its positive (e^2) and two orthogonal tokens (e^0 each)
    assert got == pytest.approx(expected, abs=1e-9)
    assert brute == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("B,M,sym", [(2, 3, True), (3, 2, False), (1, 4, True), (4, 1, True)])
def test_matches_brute_force(rng, B, M, sym):
    for tau in (0.5, 0.1):
        a, b = rand_pair(rng, B, M)
        got = token_contrastive_loss(a, b, tau, sym).item()
        want = nt_xent_brute(a.numpy(), b.numpy(), tau, sym)
        assert got == pytest.approx(want, rel=1e-6)


def test_weighted_matches_brute_force(rng):
    for B, M, w in [(2, 3, 5.0), (3, 2, 0.0), (2, 2, 2.5)]:
        a, b = rand_pair(rng, B, M)
        got = weighted_token_contrastive_loss(a, b, 0.5, w).item()
        assert got == pytest.approx(weighted_brute(a.numpy(), b.numpy(), 0.5, w), rel=1e-6)


def test_w_one_reduces_to_unweighted(rng):
    for _ in range(100):
        B, M = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        a, b = rand_pair(rng, B, M)
        x = weighted_token_contrastive_loss(a, b, 0.5, 1.0).item()
        y = token_contrastive_loss(a, b, 0.5).item()
        assert x == pytest.approx(y, rel=1e-6)


def test_single_volume_ignores_w(rng):
    a, b = rand_pair(rng, 1, 4)
    base = token_contrastive_loss(a, b).item()
    for w in (0.0, 5.0, 100.0):
        assert weighted_token_contrastive_loss(a, b, 0.5, w).item() == pytest.approx(base, rel=1e-9)


def test_hand_built_weighted_case():
    e1, e2 = torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64)
    z_rot = torch.stack([e1, e2])[:, None]        # volume 0 -> e1, volume 1 -> e2
    z_mask = z_rot.clone()
    got = weighted_token_contrastive_loss(z_rot, z_mask, 0.5, 5.0, symmetrize=False)
    closed = math.log(math.e ** 2 + 10) - 2
    assert closed == pytest.approx(0.8558, abs=5e-5)
    # every anchor is symmetric to the first one here
    assert got.item() == pytest.approx(closed, abs=1e-12)
    assert weighted_brute(z_rot.numpy(), z_mask.numpy(), 0.5, 5.0) == pytest.approx(closed)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), w=st.floats(0, 10))
def test_orthogonal_invariance(seed, w):
    rng = np.random.default_rng(seed)
    a, b = rand_pair(rng, 2, 3)
    q = random_orthogonal(rng, 5)
    for fn in (lambda x, y: token_contrastive_loss(x, y),
               lambda x, y: weighted_token_contrastive_loss(x, y, 0.5, w)):
        assert fn(a @ q, b @ q).item() == pytest.approx(fn(a, b).item(), rel=1e-9)


def test_monotone_in_w_with_positive_cross_similarity(rng):
    # shared positive direction keeps every same-position cosine positive
    base = torch.ones(3, 4, 6, dtype=torch.float64)
    a = base + 0.3 * torch.from_numpy(rng.random((3, 4, 6)))
    b = base + 0.3 * torch.from_numpy(rng.random((3, 4, 6)))
    vals = [weighted_token_contrastive_loss(a, b, 0.5, w).item() for w in np.linspace(0, 10, 21)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_loss_gradients_match_finite_differences(rng):
    a, b = rand_pair(rng, 2, 2, 3)
    for fn in (lambda x, y: token_contrastive_loss(x, y, 0.5),
               lambda x, y: weighted_token_contrastive_loss(x, y, 0.5, 5.0),
               lambda x, y: global_simclr_loss(x[:, 0], y[:, 0])):
        x = a.clone().requires_grad_(True)
        fn(x, b).backward()
        num = central_difference(lambda v: fn(torch.from_numpy(v), b).item(), a.numpy().copy(),
                                 1e-5)
        np.testing.assert_allclose(x.grad.numpy(), num, rtol=1e-4, atol=1e-9)


def test_errors():
    with pytest.raises(DegenerateBatch):
        token_contrastive_loss(torch.zeros(0, 3, 4), torch.zeros(0, 3, 4))
    with pytest.raises(ShapeMismatch):
        token_contrastive_loss(torch.zeros(1, 3, 4), torch.zeros(1, 2, 4))
    with pytest.raises(DegenerateBatch):
        global_simclr_loss(torch.ones(1, 4), torch.ones(1, 4))
    with pytest.raises(ShapeMismatch):
        byol_token_loss(torch.ones(1, 3, 4), torch.ones(1, 2, 4))


def test_byol_cases(rng):
    u = torch.from_numpy(rng.normal(size=(2, 5, 8)))
    assert byol_token_loss(u, 3 * u).item() == pytest.approx(0.0, abs=1e-12)
    assert byol_token_loss(u, -u).item() == pytest.approx(4.0, abs=1e-12)
    v = torch.from_numpy(rng.normal(size=(2, 5, 8)))
    cos = torch.nn.functional.cosine_similarity(u, v, dim=-1).mean().item()
    assert byol_token_loss(u, v).item() == pytest.approx(2 - 2 * cos, rel=1e-6)


def test_byol_target_branch_gets_no_gradient(rng):
    torch.manual_seed(0)
    online, target = ProjectionHead(6, 4).double(), ProjectionHead(6, 4).double()
    x = torch.from_numpy(rng.normal(size=(2, 3, 6)))
    byol_token_loss(online(x), target(x)).backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in target.parameters())
    assert any(p.grad is not None and torch.any(p.grad != 0) for p in online.parameters())


def test_global_simclr_same_kernel(rng):
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    g = global_simclr_loss(ta, tb).item()
    assert g == pytest.approx(token_contrastive_loss(ta[:, None], tb[:, None]).item(), abs=1e-9)
    e = torch.eye(4, dtype=torch.float64)
    assert global_simclr_loss(e[:2], e[2:]).item() == pytest.approx(
        nt_xent_brute(e[:2, None].numpy(), e[2:, None].numpy(), 0.5), abs=1e-12)
    q = random_orthogonal(rng, 6)
    assert global_simclr_loss(ta @ q, tb @ q).item() == pytest.approx(g, rel=1e-9)


def test_projection_head_is_position_wise(rng):
    head = ProjectionHead(6).double()
    x = torch.from_numpy(rng.normal(size=(2, 5, 6)))
    out = head(x)
    assert out.shape == (2, 5, 32)
    torch.testing.assert_close(out[:, 2], head(x[:, 2:3])[:, 0])


def test_collapse_full():
    t = torch.ones(3, 4, 8)
    r = collapse_metrics(t, t)
    assert r.cross_volume_cos == pytest.approx(1)
    assert r.within_volume_cos == pytest.approx(1)
    assert r.positive_cos == pytest.approx(1)
    assert r.position_variance == pytest.approx(0, abs=1e-12)


def test_collapse_position_constant_construction():
    # same vector per position across volumes, fixed 0.3 cosine between positions
    c = 0.3
    p0 = np.array([1.0, 0.0])
    p1 = np.array([c, math.sqrt(1 - c * c)])
    t = torch.from_numpy(np.stack([np.stack([p0, p1])] * 5))
    r = collapse_metrics(t)
    assert r.cross_volume_cos == pytest.approx(1)
    assert r.within_volume_cos == pytest.approx(c)
    assert math.isnan(r.positive_cos)


def test_collapse_isotropic_random(rng):
    t = torch.from_numpy(rng.normal(size=(50, 4, 32)))    # 4 * 50 * 49 ordered pairs
    assert abs(collapse_metrics(t).cross_volume_cos) < 0.1
    with pytest.raises(DegenerateBatch):
        collapse_metrics(t[:1])
