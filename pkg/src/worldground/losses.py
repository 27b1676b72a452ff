"""Training objectives: the stage-1 rollout loss (Tversky + focal over
predicted saliency maps) and the stage-2 grounding loss (node BCE + L1
mask and box regression).

All mask-valued inputs here live in [0, 1]; callers apply sigmoid to
logits before handing them in.
"""

from __future__ import annotations

import dataclasses

import torch
from torch.nn import functional as F

from .errors import ConfigError, ValidationError

_CLAMP = 1e-7


@dataclasses.dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3          # Tversky false-positive weight
    beta: float = 0.7           # Tversky false-negative weight
    epsilon: float = 1.0        # Tversky smoothing
    alpha_t: float = 0.25       # focal class weight
    gamma: float = 2.0          # focal exponent
    lambda_tve: float = 1.0
    lambda_foc: float = 1.0
    lambda_cls: float = 1.0
    lambda_reg: float = 5.0

    def validate(self) -> "LossConfig":
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if not 0 < self.alpha_t <= 1:
            raise ConfigError(f"alpha_t must lie in (0, 1], got "
                              f"{self.alpha_t}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("lambda_tve", "lambda_foc", "lambda_cls", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    @classmethod
    def from_config(cls, cfg) -> "LossConfig":
        return cls(alpha=cfg["loss.alpha"], beta=cfg["loss.beta"],
                   epsilon=cfg["loss.epsilon"], alpha_t=cfg["loss.alpha_t"],
                   gamma=cfg["loss.gamma"],
                   lambda_tve=cfg["loss.lambda_tve"],
                   lambda_foc=cfg["loss.lambda_foc"],
                   lambda_cls=cfg["loss.lambda_cls"],
                   lambda_reg=cfg["loss.lambda_reg"]).validate()


def downsample_mask(gt_mask: torch.Tensor, target_dims) -> torch.Tensor:
    """Bilinear resample of a [H, W] mask to target (h, w); values stay
    in [0, 1]."""
    th, tw = target_dims
    mask = gt_mask.to(torch.float32)
    if mask.ndim != 2:
        raise ValidationError(f"mask: expected 2-d, got "
                              f"{tuple(mask.shape)}")
    if mask.shape == (th, tw):
        return mask
    out = F.interpolate(mask.unsqueeze(0).unsqueeze(0), size=(th, tw),
                        mode="bilinear", align_corners=False)
    return out[0, 0]


def tversky_loss(S: torch.Tensor, S_hat: torch.Tensor,
                 cfg: LossConfig) -> torch.Tensor:
    """1 - (I + eps) / (I + F_alpha + F_beta + eps) for the single target
    class; p = S (prediction), g = S_hat (ground truth)."""
    if cfg.epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {cfg.epsilon}")
    if S.shape != S_hat.shape:
        raise ValidationError(f"prediction {tuple(S.shape)} vs target "
                              f"{tuple(S_hat.shape)}")
    p = S.reshape(-1)
    g = S_hat.reshape(-1)
    inter = (p * g).sum()
    fp = cfg.alpha * ((1.0 - g) * p).sum()
    fn = cfg.beta * (g * (1.0 - p)).sum()
    return 1.0 - (inter + cfg.epsilon) / (inter + fp + fn + cfg.epsilon)


def focal_term(p: torch.Tensor, g: torch.Tensor,
               cfg: LossConfig) -> torch.Tensor:
    """-mean of H(p, g) = alpha_t (1 - p_t)^gamma log(p_t), with
    p_t = p where g = 1 and 1 - p where g = 0 (linear in between)."""
    if p.shape != g.shape:
        raise ValidationError(f"prediction {tuple(p.shape)} vs target "
                              f"{tuple(g.shape)}")
    p = p.reshape(-1).clamp(_CLAMP, 1.0 - _CLAMP)
    g = g.reshape(-1)
    p_t = g * p + (1.0 - g) * (1.0 - p)
    h = cfg.alpha_t * (1.0 - p_t) ** cfg.gamma * torch.log(p_t)
    return -h.mean()


def rollout_loss(S_pred_stack: torch.Tensor, S_hat: torch.Tensor,
                 cfg: LossConfig) -> torch.Tensor:
    """Mean over predicted maps (layers and rollout steps alike) of
    lambda_tve * Tversky + lambda_foc * focal, against the shared
    downsampled target.

    Vectorized over the map axis; per map it matches
    tversky_loss + focal_term exactly.
    """
    if S_pred_stack.ndim < 2:
        raise ValidationError("expected a stack of maps, got shape "
                              f"{tuple(S_pred_stack.shape)}")
    p = S_pred_stack.reshape(S_pred_stack.shape[0], -1)
    g = S_hat.reshape(-1)
    if p.shape[1] != g.shape[0]:
        raise ValidationError(f"map size {p.shape[1]} vs target "
                              f"{g.shape[0]}")
    g = g.unsqueeze(0)
    inter = (p * g).sum(dim=1)
    fp = cfg.alpha * ((1.0 - g) * p).sum(dim=1)
    fn = cfg.beta * (g * (1.0 - p)).sum(dim=1)
    tve = 1.0 - (inter + cfg.epsilon) / (inter + fp + fn + cfg.epsilon)
    pc = p.clamp(_CLAMP, 1.0 - _CLAMP)
    p_t = g * pc + (1.0 - g) * (1.0 - pc)
    foc = -(cfg.alpha_t * (1.0 - p_t) ** cfg.gamma
            * torch.log(p_t)).mean(dim=1)
    return (cfg.lambda_tve * tve + cfg.lambda_foc * foc).mean()


def grounding_loss(probs: torch.Tensor, target_index: int,
                   S_lat: torch.Tensor, S_hat: torch.Tensor,
                   box: torch.Tensor, gt_box: torch.Tensor,
                   cfg: LossConfig) -> torch.Tensor:
    """lambda_cls * BCE(per-node binary vs one-hot target, mean-reduced)
    + lambda_reg * (mean |S_lat - S_hat| + mean |box - gt_box|).

    S_lat is expected in the same value space as S_hat; callers pass the
    sigmoid of the mask logits."""
    n = probs.shape[0]
    if not 0 <= target_index < n:
        raise ValidationError(f"target index {target_index} outside "
                              f"[0, {n})")
    if S_lat.shape != S_hat.shape:
        raise ValidationError(f"mask shapes differ: {tuple(S_lat.shape)} "
                              f"vs {tuple(S_hat.shape)}")
    p = probs.clamp(_CLAMP, 1.0 - _CLAMP)
    onehot = torch.zeros_like(probs)
    onehot[target_index] = 1.0
    bce = -(onehot * torch.log(p)
            + (1.0 - onehot) * torch.log(1.0 - p)).mean()
    mask_l1 = (S_lat - S_hat).abs().mean()
    box_l1 = (box - gt_box).abs().mean()
    return cfg.lambda_cls * bce + cfg.lambda_reg * (mask_l1 + box_l1)
