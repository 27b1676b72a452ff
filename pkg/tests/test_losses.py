import math

import numpy as np
import pytest
import torch

from worldground import losses, oracle
from worldground.errors import ConfigError, ValidationError

CFG = losses.LossConfig()


def rand_probs(rng, shape):
    return torch.tensor(rng.random(shape) * 0.98 + 0.01)


# ---------------------------------------------------------------------------
# downsample_mask

def test_downsample_identity_and_constant():
    m = torch.rand(6, 6)
    assert torch.equal(losses.downsample_mask(m, (6, 6)), m)
    ones = torch.ones(8, 8)
    out = losses.downsample_mask(ones, (3, 3))
    assert torch.allclose(out, torch.ones(3, 3))


def test_downsample_single_pixel_bilinear_values():
    m = torch.zeros(4, 4)
    m[0, 0] = 1.0
    out = losses.downsample_mask(m, (2, 2))
    # hand-computed align_corners=False bilinear taps
    expected = torch.tensor([[0.25, 0.0], [0.0, 0.0]])
    assert torch.allclose(out, expected, atol=1e-6)


# ---------------------------------------------------------------------------
# tversky

def test_tversky_frozen_point_four():
    p = torch.full((4,), 0.5)
    g = torch.tensor([1.0, 0.0, 0.0, 0.0])
    v = losses.tversky_loss(p, g, losses.LossConfig(alpha=0.5, beta=0.5,
                                                    epsilon=1.0))
    assert abs(float(v) - 0.4) < 1e-6


def test_tversky_perfect_is_zero():
    g = torch.tensor([1.0, 0.0, 1.0])
    v = losses.tversky_loss(g, g, CFG)
    assert abs(float(v)) < 1e-7


def test_tversky_alpha_beta_swap_symmetry():
    # swapping the argument roles swaps FP and FN exactly, so the
    # alpha/beta swap restores the value
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rand_probs(rng, 12)
        g = torch.tensor((rng.random(12) > 0.5).astype(np.float64))
        a = losses.tversky_loss(
            p, g, losses.LossConfig(alpha=0.3, beta=0.7, epsilon=1e-9))
        b = losses.tversky_loss(
            g, p, losses.LossConfig(alpha=0.7, beta=0.3, epsilon=1e-9))
        assert abs(float(a) - float(b)) < 1e-6


def test_tversky_equals_dice_at_half():
    # alpha=beta=0.5 reduces to 1 - Dice with the same smoothing
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = rand_probs(rng, 9)
        g = torch.tensor((rng.random(9) > 0.4).astype(np.float64))
        tve = losses.tversky_loss(
            p, g, losses.LossConfig(alpha=0.5, beta=0.5, epsilon=1.0))
        inter = float((p * g).sum())
        dice = (2 * inter + 2.0) / (float(p.sum() + g.sum()) + 2.0)
        assert abs(float(tve) - (1.0 - dice)) < 1e-6


def test_tversky_bounded_on_probabilities():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rand_probs(rng, 16)
        g = torch.tensor((rng.random(16) > 0.5).astype(np.float64))
        v = float(losses.tversky_loss(p, g, CFG))
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# focal

def test_focal_frozen_value():
    p = torch.tensor([0.5])
    g = torch.tensor([1.0])
    v = losses.focal_term(p, g, CFG)
    assert abs(float(v) - 0.043321) < 1e-6


def test_focal_perfect_near_zero():
    v = losses.focal_term(torch.tensor([1.0]), torch.tensor([1.0]), CFG)
    assert 0.0 <= float(v) < 1e-5


def test_focal_gamma_zero_is_cross_entropy():
    p = torch.tensor([0.3, 0.8])
    g = torch.tensor([1.0, 1.0])
    v = losses.focal_term(p, g, losses.LossConfig(alpha_t=1.0, gamma=0.0))
    ce = -(math.log(0.3) + math.log(0.8)) / 2
    assert abs(float(v) - ce) < 1e-6


def test_focal_monotone_in_p_for_positives():
    g = torch.ones(1)
    last = float("inf")
    for p in (0.1, 0.3, 0.5, 0.7, 0.9, 0.99):
        v = float(losses.focal_term(torch.tensor([p]), g, CFG))
        assert v >= 0.0
        assert v < last
        last = v


# ---------------------------------------------------------------------------
# rollout_loss

def test_rollout_loss_matches_scalar_reference():
    rng = np.random.default_rng(4)
    for _ in range(50):
        maps = rng.random((3, 12)) * 0.9 + 0.05
        target = (rng.random(12) > 0.5).astype(np.float64)
        got = losses.rollout_loss(torch.tensor(maps),
                                  torch.tensor(target), CFG)
        want = oracle.ref_rollout_loss(
            maps, target, CFG.alpha, CFG.beta, CFG.epsilon,
            CFG.alpha_t, CFG.gamma, CFG.lambda_tve, CFG.lambda_foc)
        assert abs(float(got) - want) < 1e-6


def test_rollout_loss_vectorization_matches_per_map_loop():
    rng = np.random.default_rng(5)
    maps = torch.tensor(rng.random((4, 9)) * 0.9 + 0.05)
    target = torch.tensor((rng.random(9) > 0.5).astype(np.float64))
    whole = losses.rollout_loss(maps, target, CFG)
    per_map = [losses.rollout_loss(maps[i:i + 1], target, CFG)
               for i in range(maps.shape[0])]
    assert abs(float(whole) - sum(float(v) for v in per_map) / 4) < 1e-9


def test_rollout_loss_focal_isolation():
    cfg = losses.LossConfig(lambda_foc=0.0)
    maps = torch.tensor([[0.2, 0.7, 0.4, 0.9]])
    target = torch.tensor([0.0, 1.0, 0.0, 1.0])
    got = losses.rollout_loss(maps, target, cfg)
    want = losses.tversky_loss(maps[0], target, cfg) * cfg.lambda_tve
    assert abs(float(got) - float(want)) < 1e-9


def test_rollout_loss_perfect_prediction_tiny():
    target = torch.tensor([1.0, 0.0, 0.0, 1.0])
    v = losses.rollout_loss(target.unsqueeze(0), target, CFG)
    assert float(v) < 1e-5


# ---------------------------------------------------------------------------
# grounding_loss

def test_grounding_loss_matches_scalar_reference():
    rng = np.random.default_rng(6)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        probs = rng.random(n) * 0.9 + 0.05
        target = int(rng.integers(n))
        s_lat = rng.random((3, 3))
        s_hat = (rng.random((3, 3)) > 0.5).astype(np.float64)
        box = rng.random(4)
        gt = rng.random(4)
        got = losses.grounding_loss(
            torch.tensor(probs), target, torch.tensor(s_lat),
            torch.tensor(s_hat), torch.tensor(box), torch.tensor(gt),
            CFG)
        want = oracle.ref_grounding_loss(
            probs, target, s_lat, s_hat, box, gt,
            CFG.lambda_cls, CFG.lambda_reg)
        assert abs(float(got) - want) < 1e-6


def test_grounding_loss_frozen_bce():
    cfg = losses.LossConfig(lambda_cls=1.0, lambda_reg=0.0)
    v = losses.grounding_loss(
        torch.tensor([0.5, 0.5]), 0, torch.zeros(2, 2),
        torch.zeros(2, 2), torch.zeros(4), torch.zeros(4), cfg)
    assert abs(float(v) - 0.693147) < 1e-5


def test_grounding_loss_perfect_prediction():
    s = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    box = torch.tensor([0.1, 0.2, 0.5, 0.6])
    v = losses.grounding_loss(torch.tensor([1.0, 0.0, 0.0]), 0, s, s,
                              box, box, CFG)
    assert float(v) < 1e-5


def test_grounding_loss_validates_inputs():
    with pytest.raises(ValidationError):
        losses.grounding_loss(torch.tensor([0.5, 0.5]), 2,
                              torch.zeros(2, 2), torch.zeros(2, 2),
                              torch.zeros(4), torch.zeros(4), CFG)
    with pytest.raises(ValidationError):
        losses.grounding_loss(torch.tensor([0.5, 0.5]), 0,
                              torch.zeros(2, 2), torch.zeros(3, 3),
                              torch.zeros(4), torch.zeros(4), CFG)


# ---------------------------------------------------------------------------
# LossConfig

def test_loss_config_validation():
    with pytest.raises(ConfigError):
        losses.LossConfig(epsilon=-1.0).validate()
    with pytest.raises(ConfigError):
        losses.LossConfig(gamma=-0.1).validate()
    losses.LossConfig().validate()


def test_loss_config_from_config():
    from worldground import config as C
    cfg = C.load_config(None).overridden(loss__alpha=0.4)
    lc = losses.LossConfig.from_config(cfg)
    assert lc.alpha == 0.4
    assert lc.lambda_reg == 5.0
