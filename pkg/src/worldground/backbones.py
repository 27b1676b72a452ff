"""Toy encoders producing the feature contracts the rest of the model
consumes: a visual patch map F_v, text features F_c, object vectors F_o,
a patch-aligned depth map F_d, and the exponential-decay depth prior.

These stand in for the full-scale pretrained backbones; the tensor
contracts are identical, the capacity is not.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import scenesynth, vocab
from .errors import ConfigError, ValidationError
from .rng import Rng

MAX_TEXT_LEN = 50


def init_linear(module: nn.Module) -> None:
    """Xavier-uniform matrices, zero biases, recursively."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.xavier_uniform_(m.weight.view(m.weight.shape[0], -1))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.xavier_uniform_(m.weight)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):  # [T, dim] or [B, T, dim]
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, t, dim = x.shape
        hd = dim // self.heads
        q, k, v = (self.qkv(x).reshape(b, t, 3, self.heads, hd)
                   .permute(2, 0, 3, 1, 4))
        y = F.scaled_dot_product_attention(q, k, v)  # [B, heads, T, hd]
        out = self.out(y.permute(0, 2, 1, 3).reshape(b, t, dim))
        return out.squeeze(0) if squeeze else out


class EncoderBlock(nn.Module):
    """Pre-norm transformer block; maps zero input to zero at init."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisualEncoder(nn.Module):
    def __init__(self, dim: int = 64, patch: int = 8, blocks: int = 2,
                 heads: int = 4, grid: int = 12):
        super().__init__()
        self.dim = dim
        self.patch = patch
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(grid * grid, dim))
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads)
                                    for _ in range(blocks))
        init_linear(self)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """image [3, H, W] -> F_v [dim, H/p, W/p]; a leading batch axis
        is carried through."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValidationError(f"image: expected [3, H, W], got "
                                  f"{tuple(image.shape)}")
        b, _, h, w = image.shape
        if h % self.patch or w % self.patch:
            raise ValidationError(f"image dims {h}x{w} not divisible by "
                                  f"patch size {self.patch}")
        fmap = self.embed(image)  # [B, dim, h', w']
        _, _, hp, wp = fmap.shape
        tokens = fmap.reshape(b, self.dim, hp * wp).transpose(1, 2)
        if tokens.shape[1] == self.pos.shape[0]:
            tokens = tokens + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        out = tokens.transpose(1, 2).reshape(b, self.dim, hp, wp)
        return out.squeeze(0) if squeeze else out


class TextEncoder(nn.Module):
    def __init__(self, dim: int = 64, blocks: int = 2, heads: int = 4,
                 vocab_size: int = None):
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(vocab_size or len(vocab.WORDS), dim)
        self.pos = nn.Parameter(torch.zeros(MAX_TEXT_LEN, dim))
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads)
                                    for _ in range(blocks))
        init_linear(self)

    def forward(self, tokens: torch.Tensor, positional: bool = True):
        """tokens [L] int64 -> F_c [L, dim]; a leading batch axis (equal
        lengths) is carried through."""
        if tokens.ndim not in (1, 2):
            raise ValidationError(f"tokens: expected 1-d, got "
                                  f"{tuple(tokens.shape)}")
        length = tokens.shape[-1]
        if length < 1 or length > MAX_TEXT_LEN:
            raise ValidationError(f"token count {length} outside "
                                  f"[1, {MAX_TEXT_LEN}]")
        x = self.embed(tokens)
        if positional:
            x = x + self.pos[:length]
        for block in self.blocks:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# object provider


@dataclasses.dataclass
class ObjectSet:
    """Plain per-object data prior to embedding."""
    kinds: list      # index into scenesynth.KINDS, or -1 when unknown
    colors: list     # index into scenesynth.COLORS, or -1
    boxes: list      # normalized (x0, y0, x1, y1)

    def __len__(self):
        return len(self.boxes)


def provide_objects(sample: scenesynth.SceneSample,
                    mode: str = "oracle") -> ObjectSet:
    if mode == "oracle":
        if not sample.objects:
            raise ValidationError("sample has zero objects; grounding "
                                  "is undefined")
        return ObjectSet(
            kinds=[scenesynth.KINDS.index(o.kind) for o in sample.objects],
            colors=[scenesynth.COLORS.index(o.color) for o in sample.objects],
            boxes=[o.box for o in sample.objects])
    if mode == "heuristic":
        found = scenesynth.detect_objects(sample.image)
        if not found:
            raise ValidationError("detector found zero objects; grounding "
                                  "is undefined")
        return ObjectSet(
            kinds=[-1] * len(found),
            colors=[scenesynth.COLORS.index(c) for _, c in found],
            boxes=[b for b, _ in found])
    raise ConfigError(f"unknown object mode {mode!r}")


def patch_footprint(box, grid_h: int, grid_w: int):
    """Patch-index bounds (r0, r1, c0, c1), half-open, of the patches a
    normalized box overlaps. Raises if the footprint is empty."""
    x0, y0, x1, y1 = box
    c0 = int(math.floor(x0 * grid_w))
    c1 = int(math.ceil(x1 * grid_w))
    r0 = int(math.floor(y0 * grid_h))
    r1 = int(math.ceil(y1 * grid_h))
    c0, c1 = max(0, c0), min(grid_w, c1)
    r0, r1 = max(0, r0), min(grid_h, r1)
    if r0 >= r1 or c0 >= c1:
        raise ValidationError(f"box {box} has an empty patch footprint on a "
                              f"{grid_h}x{grid_w} grid")
    return r0, r1, c0, c1


def footprint_masks(boxes, grid_h: int, grid_w: int) -> torch.Tensor:
    """Boolean [n, grid_h * grid_w] patch membership per box."""
    masks = torch.zeros(len(boxes), grid_h, grid_w, dtype=torch.bool)
    for i, box in enumerate(boxes):
        r0, r1, c0, c1 = patch_footprint(box, grid_h, grid_w)
        masks[i, r0:r1, c0:c1] = True
    return masks.reshape(len(boxes), grid_h * grid_w)


class ObjectEncoder(nn.Module):
    """Embeds (kind, color, box geometry, mean patch feature) per object."""

    N_KINDS = len(scenesynth.KINDS)
    N_COLORS = len(scenesynth.COLORS)

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(self.N_KINDS + self.N_COLORS + 8 + dim, dim)
        init_linear(self)

    @classmethod
    def static_features(cls, objects: ObjectSet) -> torch.Tensor:
        """The input columns that do not depend on the visual features:
        one-hot kind and color plus box geometry. [n, kinds+colors+8]."""
        if len(objects) == 0:
            raise ValidationError("zero objects")
        rows = []
        for kind, color, box in zip(objects.kinds, objects.colors,
                                    objects.boxes):
            kind_oh = torch.zeros(cls.N_KINDS)
            if kind >= 0:
                kind_oh[kind] = 1.0
            color_oh = torch.zeros(cls.N_COLORS)
            if color >= 0:
                color_oh[color] = 1.0
            x0, y0, x1, y1 = box
            geom = torch.tensor([x0, y0, x1, y1, (x0 + x1) / 2,
                                 (y0 + y1) / 2, x1 - x0, y1 - y0])
            rows.append(torch.cat([kind_oh, color_oh, geom]))
        return torch.stack(rows)

    def forward(self, objects: ObjectSet, F_v: torch.Tensor,
                static=None, masks=None) -> torch.Tensor:
        """static and masks, when precomputed, skip the per-object Python
        work; the result is the same."""
        if len(objects) == 0:
            raise ValidationError("zero objects")
        dim, gh, gw = F_v.shape
        flat = F_v.reshape(dim, gh * gw).T
        if static is None:
            static = self.static_features(objects)
        if masks is None:
            masks = footprint_masks(objects.boxes, gh, gw)
        weights = masks.to(flat.dtype)
        pooled = (weights / weights.sum(dim=1, keepdim=True)) @ flat
        return self.proj(torch.cat([static.to(flat.dtype), pooled], dim=1))


# ---------------------------------------------------------------------------
# depth


def provide_depth(sample: scenesynth.SceneSample, noise_sigma: float = 0.0,
                  patch: int = 8, seed: int = 0) -> torch.Tensor:
    """Ground-truth depth + Gaussian noise, average-pooled to the patch
    grid. Cells that are pure sky come back as +inf sentinels."""
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    depth = np.array(sample.depth, dtype=np.float64)
    h, w = depth.shape
    if h % patch or w % patch:
        raise ValidationError(f"depth dims {h}x{w} not divisible by patch "
                              f"size {patch}")
    finite = np.isfinite(depth)
    if noise_sigma > 0:
        noise = Rng(seed, stream=29).normals(h * w, 0.0, noise_sigma)
        depth = np.where(finite, depth + noise.reshape(h, w), depth)
    gh, gw = h // patch, w // patch
    cells = np.where(finite, depth, 0.0).reshape(gh, patch, gw, patch)
    counts = finite.reshape(gh, patch, gw, patch).sum(axis=(1, 3))
    sums = cells.sum(axis=(1, 3))
    out = np.where(counts > 0,
                   np.maximum(sums / np.maximum(counts, 1), 1e-3), np.inf)
    return torch.from_numpy(out.astype(np.float32))


@dataclasses.dataclass
class PriorMap:
    P: torch.Tensor        # [P_v], >= 0, exactly 0 at sentinels
    feat: torch.Tensor     # [P_v, F] per-patch prior feature for saliency
    F_nor: torch.Tensor    # [P_v] normalized depth in [0, 1]


class DepthPrior(nn.Module):
    """P(x) = softplus(MLP(exp(-alpha * F_d(x)))); sentinel pixels map to
    exactly zero and are excluded from further processing."""

    def __init__(self, hidden: int = 16, scalar_mode: bool = False):
        super().__init__()
        self.hidden = hidden
        self.scalar_mode = scalar_mode
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        init_linear(self)

    @property
    def feat_dim(self) -> int:
        return 1 if self.scalar_mode else self.hidden

    def forward(self, F_d: torch.Tensor, alpha: float) -> PriorMap:
        if alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {alpha}")
        d = F_d.reshape(-1)
        sentinel = torch.isinf(d)
        safe = torch.where(sentinel, torch.zeros_like(d), d)
        f_nor = torch.where(sentinel, torch.zeros_like(d),
                            torch.exp(-alpha * safe))
        hidden = torch.tanh(self.fc1(f_nor.unsqueeze(1)))
        hidden = torch.where(sentinel.unsqueeze(1),
                             torch.zeros_like(hidden), hidden)
        p = F.softplus(self.fc2(hidden).squeeze(1))
        p = torch.where(sentinel, torch.zeros_like(p), p)
        feat = p.unsqueeze(1) if self.scalar_mode else hidden
        return PriorMap(P=p, feat=feat, F_nor=f_nor)
