import math

import numpy as np
import pytest
import torch

from worldground import oracle, sawm
from worldground.backbones import footprint_masks
from worldground.errors import ValidationError


def rand_inputs(rng, p=6, length=4, dim=8):
    f_v = torch.tensor(rng.standard_normal((p, dim)), dtype=torch.float64)
    f_c = torch.tensor(rng.standard_normal((length, dim)),
                       dtype=torch.float64)
    return f_v, f_c


# ---------------------------------------------------------------------------
# cross-modal attention

def test_cross_modal_rows_are_stochastic():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    layer = sawm.CrossModalLayer(8).double()
    for _ in range(20):
        f_v, f_c = rand_inputs(rng)
        maps = layer(f_v, f_c)
        for a in (maps.A_t, maps.A_v):
            assert bool((a >= 0).all())
            assert torch.allclose(a.sum(dim=1), torch.ones(a.shape[0],
                                                           dtype=a.dtype),
                                  atol=1e-6)


def test_cross_modal_single_token_column():
    torch.manual_seed(1)
    layer = sawm.CrossModalLayer(8).double()
    f_v, f_c = rand_inputs(np.random.default_rng(1), length=1)
    maps = layer(f_v, f_c)
    assert torch.allclose(maps.A_t, torch.ones_like(maps.A_t))


def test_cross_modal_matches_reference_loop():
    rng = np.random.default_rng(2)
    torch.manual_seed(2)
    for _ in range(10):
        layer = sawm.CrossModalLayer(8).double()
        with torch.no_grad():
            for p in layer.parameters():
                p.copy_(torch.tensor(
                    rng.standard_normal(tuple(p.shape)) * 0.3))
        f_v, f_c = rand_inputs(rng, p=3, length=2)
        maps = layer(f_v, f_c)
        a_t, a_v, o_t, o_v = oracle.ref_cross_modal(
            f_v.numpy(), f_c.numpy(),
            layer.w_q_vis.weight.detach().numpy(),
            layer.w_k_t.weight.detach().numpy(),
            layer.w_q_tex.weight.detach().numpy(),
            layer.w_k_vis.weight.detach().numpy(),
            layer.w_v_vis.weight.detach().numpy(),
            layer.w_v_tex.weight.detach().numpy())
        assert np.abs(maps.A_t.detach().numpy() - a_t).max() < 1e-6
        assert np.abs(maps.A_v.detach().numpy() - a_v).max() < 1e-6
        assert np.abs(maps.O_t.detach().numpy() - o_t).max() < 1e-6
        assert np.abs(maps.O_v.detach().numpy() - o_v).max() < 1e-6


# ---------------------------------------------------------------------------
# saliency

def test_saliency_matches_scalar_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, d, f = 5, 4, 3
        f_v = torch.tensor(rng.standard_normal((p, d)))
        o_v = torch.tensor(rng.standard_normal((p, d)))
        feat = torch.tensor(rng.standard_normal((p, f)))
        a = torch.tensor(rng.standard_normal(f))
        mu = torch.tensor(0.5 + rng.random())
        sigma = torch.tensor(0.5 + rng.random())
        got = sawm.saliency_scores(f_v, o_v, feat, a, mu, sigma)
        want = oracle.ref_saliency(f_v.numpy(), o_v.numpy(), feat.numpy(),
                                   a.numpy(), float(mu), float(sigma))
        assert np.abs(got.numpy() - want).max() < 1e-6


def test_saliency_zero_prior_zero_score():
    f_v = torch.ones(3, 4)
    feat = torch.zeros(3, 2)
    s = sawm.saliency_scores(f_v, f_v, feat, torch.tensor([1.0, 2.0]),
                             torch.tensor(1.0), torch.tensor(1.0))
    assert float(s.abs().max()) == 0.0


def test_saliency_perfect_alignment_drops_exponent():
    # unit-aligned rows: s = sigma^2 * (a . p)
    f_v = torch.eye(3, 4)
    feat = torch.full((3, 2), 0.5)
    a = torch.tensor([1.0, 1.0])
    s = sawm.saliency_scores(f_v, f_v, feat, a, torch.tensor(2.0),
                             torch.tensor(3.0))
    assert torch.allclose(s, torch.full((3,), 9.0), atol=1e-6)


def test_saliency_head_inits_to_exact_zero():
    head = sawm.SaliencyHead(4)
    assert abs(float(head.mu.detach()) - 1.0) < 1e-6
    assert abs(float(head.sigma.detach()) - 1.0) < 1e-6
    s = head(torch.rand(5, 3), torch.rand(5, 3), torch.rand(5, 4))
    assert float(s.detach().abs().max()) == 0.0  # a-vector starts at zero


def test_saliency_shape_mismatch():
    with pytest.raises(ValidationError):
        sawm.saliency_scores(torch.rand(3, 4), torch.rand(2, 4),
                             torch.rand(3, 2), torch.rand(2),
                             torch.tensor(1.0), torch.tensor(1.0))


# ---------------------------------------------------------------------------
# region pooling

def test_region_pool_two_disjoint_regions():
    # hand case on a 4x4 grid: region means 0.2 and 0.9
    scores = torch.zeros(1, 16)
    scores[0, 0] = 0.2   # patch (0,0)
    scores[0, 15] = 0.9  # patch (3,3)
    boxes = [(0.0, 0.0, 0.24, 0.24), (0.76, 0.76, 1.0, 1.0)]
    painted, per_region = sawm.region_pool(scores, boxes, (4, 4))
    assert abs(float(per_region[0]) - 0.2) < 1e-6
    assert abs(float(per_region[1]) - 0.9) < 1e-6
    assert abs(float(painted[0]) - 0.2) < 1e-6
    assert abs(float(painted[15]) - 0.9) < 1e-6
    assert float(painted[1]) == 0.0  # background


def test_region_pool_constant_field():
    scores = torch.full((3, 16), 0.37)
    painted, per_region = sawm.region_pool(
        scores, [(0.0, 0.0, 1.0, 1.0)], (4, 4))
    assert torch.allclose(painted, torch.full((16,), 0.37))
    assert abs(float(per_region[0]) - 0.37) < 1e-7


def test_region_pool_layer_mean_idempotent():
    one = torch.rand(1, 16)
    stacked = one.repeat(4, 1)
    a, _ = sawm.region_pool(one, [(0.0, 0.0, 1.0, 1.0)], (4, 4))
    b, _ = sawm.region_pool(stacked, [(0.0, 0.0, 1.0, 1.0)], (4, 4))
    assert torch.allclose(a, b, atol=1e-7)


def test_region_pool_overlap_keeps_larger():
    scores = torch.zeros(1, 16)
    scores[0, 5] = 1.0
    # both boxes cover patch 5; the second has the larger pooled score
    boxes = [(0.0, 0.0, 0.6, 0.6), (0.26, 0.26, 0.6, 0.6)]
    painted, per_region = sawm.region_pool(scores, boxes, (4, 4))
    assert float(painted[5]) == max(float(per_region[0]),
                                    float(per_region[1]))


def test_region_pool_negative_scores_survive():
    scores = torch.full((1, 16), -2.0)
    painted, per_region = sawm.region_pool(
        scores, [(0.0, 0.0, 0.3, 0.3)], (4, 4))
    assert float(per_region[0]) == -2.0
    assert float(painted[0]) == -2.0


def test_region_pool_mask_path_matches_lazy():
    rng = np.random.default_rng(4)
    scores = torch.tensor(rng.standard_normal((3, 144)))
    boxes = [(0.1, 0.2, 0.4, 0.5), (0.3, 0.3, 0.9, 0.8),
             (0.6, 0.1, 0.7, 0.3)]
    lazy = sawm.region_pool(scores, boxes, (12, 12))
    masks = footprint_masks(boxes, 12, 12)
    cached = sawm.region_pool(scores, boxes, (12, 12), masks=masks)
    assert torch.equal(lazy[0], cached[0])
    assert torch.equal(lazy[1], cached[1])


def test_region_pool_rejects_empty():
    with pytest.raises(ValidationError):
        sawm.region_pool(torch.rand(1, 16), [], (4, 4))


# ---------------------------------------------------------------------------
# current state and rollout

def test_current_state_gate_identities():
    torch.manual_seed(11)
    state = sawm.CurrentState(8, 6).double()
    f_o = torch.rand(4, 8, dtype=torch.float64)
    zero = state(f_o, torch.zeros(4, dtype=torch.float64))
    plain = state.net(f_o)
    assert torch.allclose(zero, plain, atol=1e-12)
    ones = state(f_o, torch.ones(4, dtype=torch.float64))
    doubled = state.net(2.0 * f_o)
    assert torch.allclose(ones, doubled, atol=1e-12)


def test_current_state_matches_reference():
    rng = np.random.default_rng(5)
    torch.manual_seed(12)
    state = sawm.CurrentState(6, 5).double()
    f_o = torch.tensor(rng.standard_normal((3, 6)))
    s = torch.tensor(rng.random(3))
    got = state(f_o, s)
    want = oracle.ref_build_current_state(
        f_o.numpy(), s.numpy(),
        state.net[0].weight.detach().numpy(),
        state.net[0].bias.detach().numpy(),
        state.net[2].weight.detach().numpy(),
        state.net[2].bias.detach().numpy())
    assert np.abs(got.detach().numpy() - want).max() < 1e-6


def test_rollout_zero_horizon_empty():
    torch.manual_seed(13)
    tr = sawm.RolloutTransition(6, 8)
    assert sawm.rollout(tr, torch.rand(2, 6), torch.rand(3, 8), 0) == []


def test_rollout_zero_init_is_identity():
    torch.manual_seed(14)
    tr = sawm.RolloutTransition(6, 8)
    z0 = torch.rand(3, 6)
    states = sawm.rollout(tr, z0, torch.rand(4, 8), 5)
    assert len(states) == 5
    for z in states:
        assert float((z - z0).detach().abs().max()) <= 1e-7


def test_rollout_matches_reference_loop():
    rng = np.random.default_rng(6)
    torch.manual_seed(15)
    tr = sawm.RolloutTransition(4, 4).double()
    with torch.no_grad():
        for p in tr.parameters():
            p.copy_(torch.tensor(rng.standard_normal(tuple(p.shape)) * 0.4))
    z0 = torch.tensor(rng.standard_normal((2, 4)))
    o_t = torch.tensor(rng.standard_normal((3, 4)))
    states = sawm.rollout(tr, z0, o_t, 2)
    want = oracle.ref_rollout(
        z0.numpy(), o_t.numpy(), 2,
        tr.gate.weight.detach().numpy(), tr.gate.bias.detach().numpy(),
        tr.delta[0].weight.detach().numpy(),
        tr.delta[0].bias.detach().numpy(),
        tr.delta[2].weight.detach().numpy(),
        tr.delta[2].bias.detach().numpy())
    got = torch.stack(states).detach().numpy()
    assert np.abs(got - np.stack(want)).max() < 1e-6


def test_rollout_rejects_negative_horizon():
    from worldground.errors import ConfigError
    tr = sawm.RolloutTransition(4, 4)
    with pytest.raises(ConfigError):
        sawm.rollout(tr, torch.rand(1, 4), torch.rand(2, 4), -1)


# ---------------------------------------------------------------------------
# painting

def test_paint_object_scores_background_and_footprints():
    scores = torch.tensor([1.5, -0.5])
    boxes = [(0.0, 0.0, 0.26, 0.26), (0.5, 0.5, 0.76, 0.76)]
    painted = sawm.paint_object_scores(scores, boxes, (4, 4))
    grid = painted.reshape(4, 4)
    assert float(grid[0, 0]) == 1.5
    assert float(grid[2, 2]) == -0.5  # below background still wins inside
    assert float(grid[0, 3]) == -4.0  # uncovered patch gets background


def test_paint_object_scores_overlap_max():
    scores = torch.tensor([0.2, 0.9])
    boxes = [(0.0, 0.0, 0.6, 0.6), (0.0, 0.0, 0.3, 0.3)]
    painted = sawm.paint_object_scores(scores, boxes, (4, 4))
    assert float(painted.reshape(4, 4)[0, 0]) == float(scores[1])


def test_paint_mask_path_matches_lazy():
    rng = np.random.default_rng(7)
    scores = torch.tensor(rng.standard_normal(3))
    boxes = [(0.1, 0.2, 0.4, 0.5), (0.3, 0.3, 0.9, 0.8),
             (0.05, 0.7, 0.2, 0.95)]
    lazy = sawm.paint_object_scores(scores, boxes, (12, 12))
    masks = footprint_masks(boxes, 12, 12)
    cached = sawm.paint_object_scores(scores, boxes, (12, 12), masks=masks)
    assert torch.equal(lazy, cached)
