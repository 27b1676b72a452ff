"""Spatial-aware world model: cross-modal attention layers, depth-gated
saliency, region pooling, current-state construction, and the gated
residual rollout that imagines future latent states.
"""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import nn
from torch.nn import functional as F

from .backbones import footprint_masks, init_linear, patch_footprint
from .errors import ConfigError, ValidationError


@dataclasses.dataclass
class CrossModalMaps:
    A_t: torch.Tensor   # [P_v, L] row-stochastic, visual queries over text
    A_v: torch.Tensor   # [L, P_v] row-stochastic, text queries over patches
    O_t: torch.Tensor   # [L, D] text-side vision summary
    O_v: torch.Tensor   # [P_v, D] patch-side text summary


class CrossModalLayer(nn.Module):
    """One layer of the bidirectional patch/token attention."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q_vis = nn.Linear(dim, dim, bias=False)
        self.w_k_t = nn.Linear(dim, dim, bias=False)
        self.w_q_tex = nn.Linear(dim, dim, bias=False)
        self.w_k_vis = nn.Linear(dim, dim, bias=False)
        self.w_v_vis = nn.Linear(dim, dim, bias=False)
        self.w_v_tex = nn.Linear(dim, dim, bias=False)
        init_linear(self)

    def forward(self, F_v: torch.Tensor, F_c: torch.Tensor) -> CrossModalMaps:
        """F_v [P_v, D] (spatially flattened), F_c [L, D]."""
        if F_v.ndim != 2 or F_c.ndim != 2:
            raise ValidationError("cross_modal_attention expects 2-d "
                                  f"F_v/F_c, got {tuple(F_v.shape)} and "
                                  f"{tuple(F_c.shape)}")
        if F_v.shape[1] != self.dim or F_c.shape[1] != self.dim:
            raise ValidationError(
                f"channel mismatch: F_v {tuple(F_v.shape)}, F_c "
                f"{tuple(F_c.shape)}, projections expect dim {self.dim}")
        scale = 1.0 / math.sqrt(self.dim)
        a_t = torch.softmax(
            (self.w_q_vis(F_v) @ self.w_k_t(F_c).T) * scale, dim=1)
        a_v = torch.softmax(
            (self.w_q_tex(F_c) @ self.w_k_vis(F_v).T) * scale, dim=1)
        o_t = a_t.T @ self.w_v_vis(F_v)
        o_v = a_v.T @ self.w_v_tex(F_c)
        return CrossModalMaps(A_t=a_t, A_v=a_v, O_t=o_t, O_v=o_v)


def saliency_scores(F_v: torch.Tensor, O_v: torch.Tensor,
                    prior_feat: torch.Tensor, a_vec: torch.Tensor,
                    mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-patch score: prior-weighted numerator shrunk by text-visual
    misalignment.

        s_k = sigma^2 * (a . p_k) * exp(-(1 - <F_v_k, O_v_k>)^2 / (2 mu))

    Inputs are per-patch rows: F_v, O_v [P_v, D]; prior_feat [P_v, F].
    """
    if F_v.shape != O_v.shape:
        raise ValidationError(f"F_v {tuple(F_v.shape)} and O_v "
                              f"{tuple(O_v.shape)} must match")
    if prior_feat.shape[0] != F_v.shape[0]:
        raise ValidationError("prior feature rows must match patch count")
    if prior_feat.shape[1] != a_vec.shape[0]:
        raise ValidationError(f"prior feature dim {prior_feat.shape[1]} vs "
                              f"a_vec {a_vec.shape[0]}")
    align = (F_v * O_v).sum(dim=1)
    numerator = (sigma * sigma) * (prior_feat @ a_vec)
    return numerator * torch.exp(-((1.0 - align) ** 2) / (2.0 * mu))


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class SaliencyHead(nn.Module):
    """Holds the learnable functional a and the positive mu, sigma.

    a starts at zero so the initial saliency is uniform; mu and sigma are
    softplus-reparameterized and start at exactly 1.0.
    """

    def __init__(self, feat_dim: int):
        super().__init__()
        self.a_vec = nn.Parameter(torch.zeros(feat_dim))
        self.mu_raw = nn.Parameter(torch.full((), _softplus_inv(1.0)))
        self.sigma_raw = nn.Parameter(torch.full((), _softplus_inv(1.0)))

    @property
    def mu(self) -> torch.Tensor:
        return F.softplus(self.mu_raw)

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.sigma_raw)

    def forward(self, F_v, O_v, prior_feat) -> torch.Tensor:
        return saliency_scores(F_v, O_v, prior_feat, self.a_vec,
                               self.mu, self.sigma)


class CrossModalStack(nn.Module):
    """Stacks cross-modal layers with residual feature updates and scores
    saliency at every layer from that layer's input F_v and output O_v.

    Rows of F_v and O_v are L2-normalized before the alignment dot product
    so <F_v_k, O_v_k> lands in [-1, 1] and the misalignment term behaves.
    """

    def __init__(self, dim: int, layers: int, prior_feat_dim: int):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"need >= 1 cross-modal layer, got {layers}")
        self.layers = nn.ModuleList(CrossModalLayer(dim)
                                    for _ in range(layers))
        self.saliency = SaliencyHead(prior_feat_dim)

    def forward(self, F_v: torch.Tensor, F_c: torch.Tensor, prior_feat):
        """F_v [P_v, D], F_c [L, D] -> (scores [n_layers, P_v],
        final maps, updated F_v, updated F_c)."""
        scores = []
        maps = None
        for layer in self.layers:
            maps = layer(F_v, F_c)
            f_n = F.normalize(F_v, dim=1)
            o_n = F.normalize(maps.O_v, dim=1)
            scores.append(self.saliency(f_n, o_n, prior_feat))
            F_v = F_v + maps.O_v
            F_c = F_c + maps.O_t
        return torch.stack(scores), maps, F_v, F_c


def region_pool(layer_scores: torch.Tensor, boxes, grid_hw,
                masks=None) -> tuple:
    """Average scores across layers, max-pool inside each box footprint,
    then paint each region's scalar back onto its patches.

    Returns (S_tilde [P_v], per_region [R]). Background patches are 0;
    overlapping regions keep the larger value. `masks` takes precomputed
    footprint_masks(boxes, ...) to skip the per-box Python work.
    """
    if len(boxes) == 0:
        raise ValidationError("region_pool needs at least one region")
    gh, gw = grid_hw
    if layer_scores.ndim != 2 or layer_scores.shape[1] != gh * gw:
        raise ValidationError(f"layer_scores {tuple(layer_scores.shape)} "
                              f"does not match grid {gh}x{gw}")
    mean_map = layer_scores.mean(dim=0)
    if masks is None:
        masks = footprint_masks(boxes, gh, gw)
    # negative region scores must survive, so the running max starts at
    # -inf inside footprints and background is stamped to 0 at the end
    neg_inf = torch.full_like(mean_map, -math.inf)
    per_region = torch.where(masks, mean_map.unsqueeze(0),
                             neg_inf.unsqueeze(0)).max(dim=1).values
    painted = torch.where(masks, per_region.unsqueeze(1),
                          neg_inf.unsqueeze(0)).max(dim=0).values
    covered = masks.any(dim=0)
    painted = torch.where(covered, painted, torch.zeros_like(painted))
    return painted, per_region


class CurrentState(nn.Module):
    """z_0 = MLP(F_o * s + F_o) with one pooled saliency scalar per object."""

    def __init__(self, dim: int, state_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, state_dim))
        init_linear(self)

    def forward(self, F_o: torch.Tensor, region_scores: torch.Tensor):
        if F_o.shape[0] != region_scores.shape[0]:
            raise ValidationError(f"{F_o.shape[0]} objects but "
                                  f"{region_scores.shape[0]} region scores")
        gated = F_o * region_scores.unsqueeze(1) + F_o
        return self.net(gated)


class RolloutTransition(nn.Module):
    """Gated residual MLP transition over [z_k || ctx], where ctx is the
    token-mean of the last cross-modal layer's O_t.

    The delta head's final layer starts at zero, so a freshly built
    transition is the identity: every rolled state equals z_0.
    """

    def __init__(self, state_dim: int, ctx_dim: int):
        super().__init__()
        joint = state_dim + ctx_dim
        self.gate = nn.Linear(joint, state_dim)
        self.delta = nn.Sequential(nn.Linear(joint, 2 * state_dim),
                                   nn.GELU(),
                                   nn.Linear(2 * state_dim, state_dim))
        init_linear(self)
        nn.init.zeros_(self.delta[-1].weight)
        nn.init.zeros_(self.delta[-1].bias)

    def step(self, z: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        joined = torch.cat([z, ctx.expand(z.shape[0], -1)], dim=1)
        gate = torch.sigmoid(self.gate(joined))
        return z + gate * torch.tanh(self.delta(joined))

    def forward(self, z0: torch.Tensor, O_t: torch.Tensor, horizon: int):
        return rollout(self, z0, O_t, horizon)


def rollout(transition: RolloutTransition, z0: torch.Tensor,
            O_t: torch.Tensor, horizon: int) -> list:
    """Apply the transition `horizon` times; returns [z_1 .. z_N], z_0
    excluded."""
    if horizon < 0:
        raise ConfigError(f"rollout horizon must be >= 0, got {horizon}")
    ctx = O_t.mean(dim=0)
    states = []
    z = z0
    for _ in range(horizon):
        z = transition.step(z, ctx)
        states.append(z)
    return states


def paint_object_scores(scores: torch.Tensor, boxes, grid_hw,
                        background: float = -4.0,
                        masks=None) -> torch.Tensor:
    """Spread per-object logits onto the patch grid: each patch takes the
    max score over the objects covering it, background patches take a
    fixed low logit. Returns [P_v]."""
    gh, gw = grid_hw
    if masks is None:
        masks = footprint_masks(boxes, gh, gw)
    neg_inf = torch.full((gh * gw,), -math.inf, dtype=scores.dtype)
    painted = torch.where(masks, scores.unsqueeze(1),
                          neg_inf.unsqueeze(0)).max(dim=0).values
    return torch.where(masks.any(dim=0), painted,
                       torch.full_like(painted, background))
