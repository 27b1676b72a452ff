"""Cross-modal hypergraph decoder: visual-text affinity, top-k hyperedge
construction, attention-valued incidence, spectral-style hypergraph
convolution, multi-layer dynamic (MLD) attention fusion, and the final
grounding head. A pairwise-GCN substitute is included for ablation.
"""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import nn
from torch.nn import functional as F

from .backbones import init_linear
from .errors import ConfigError, NumericError, ValidationError


class AffinityHead(nn.Module):
    """A_ij = a . [W_v z_i || W_t x_j], no nonlinearity."""

    def __init__(self, dim: int, hidden: int = None):
        super().__init__()
        hidden = hidden or dim
        self.w_v = nn.Linear(dim, hidden, bias=False)
        self.w_t = nn.Linear(dim, hidden, bias=False)
        self.a_v = nn.Parameter(torch.empty(hidden))
        self.a_t = nn.Parameter(torch.empty(hidden))
        init_linear(self)
        bound = 1.0 / math.sqrt(hidden)
        nn.init.uniform_(self.a_v, -bound, bound)
        nn.init.uniform_(self.a_t, -bound, bound)

    def forward(self, Z_v: torch.Tensor, X_t: torch.Tensor) -> torch.Tensor:
        if Z_v.shape[1] != X_t.shape[1]:
            raise ValidationError(f"projected dims differ: Z_v "
                                  f"{tuple(Z_v.shape)}, X_t {tuple(X_t.shape)}")
        u = self.w_v(Z_v) @ self.a_v   # [N]
        w = self.w_t(X_t) @ self.a_t   # [L]
        return u.unsqueeze(1) + w.unsqueeze(0)


def build_hyperedges(A: torch.Tensor, X_t: torch.Tensor, k: int):
    """One hyperedge per visual node: its top-k text nodes by affinity,
    ties broken toward the lowest text index. Returns (members [N, k]
    int64, edge_features [N, D])."""
    n, length = A.shape
    if k < 1 or k > length:
        raise ConfigError(f"hyperedge size k={k} outside [1, L={length}]")
    # stable sort on negated affinity: equal values keep ascending index
    order = torch.argsort(-A, dim=1, stable=True)
    members = order[:, :k]
    edge_features = X_t[members].mean(dim=1)
    return members, edge_features


class IncidenceAttention(nn.Module):
    """h_ij = softmax_{j in N(i)} LeakyReLU(a . [W x_i || W e_j]).

    A visual node is incident to exactly its own hyperedge; a text node to
    every hyperedge containing it. Isolated nodes get an all-zero row.
    """

    def __init__(self, dim: int, hidden: int = None, slope: float = 0.2):
        super().__init__()
        hidden = hidden or dim
        self.slope = slope
        self.w = nn.Linear(dim, hidden, bias=False)
        self.a_node = nn.Parameter(torch.empty(hidden))
        self.a_edge = nn.Parameter(torch.empty(hidden))
        init_linear(self)
        bound = 1.0 / math.sqrt(hidden)
        nn.init.uniform_(self.a_node, -bound, bound)
        nn.init.uniform_(self.a_edge, -bound, bound)

    def forward(self, nodes: torch.Tensor, edge_features: torch.Tensor,
                members: torch.Tensor, n_visual: int):
        """nodes [(N+L), D] (visual rows first), edge_features [E, D],
        members [E, k] text indices (0-based within the text block).
        Returns (H [(N+L), E], isolated [N+L] bool)."""
        total = nodes.shape[0]
        n_edges = edge_features.shape[0]
        incident = torch.zeros(total, n_edges, dtype=torch.bool)
        for j in range(n_edges):
            incident[j, j] = True  # visual node j owns edge j
            incident[n_visual + members[j], j] = True
        u = self.w(nodes) @ self.a_node      # [N+L]
        w = self.w(edge_features) @ self.a_edge  # [E]
        logits = F.leaky_relu(u.unsqueeze(1) + w.unsqueeze(0), self.slope)
        masked = torch.where(incident, logits,
                             torch.full_like(logits, -math.inf))
        isolated = ~incident.any(dim=1)
        h = torch.softmax(masked, dim=1)
        h = torch.where(isolated.unsqueeze(1), torch.zeros_like(h), h)
        return h, isolated


def hypergraph_conv(X: torch.Tensor, H: torch.Tensor, W_e: torch.Tensor,
                    theta: torch.Tensor, activation=F.elu,
                    binary_degrees: bool = False,
                    eps: float = 1e-6) -> torch.Tensor:
    """X' = act(D_v^-1/2 H W_e D_e^-1 H^T D_v^-1/2 X Theta).

    Degrees come from the attention-valued incidence by default;
    binary_degrees counts membership instead (the convention of the dense
    reference), leaving the message-passing weights untouched.
    """
    if X.shape[0] != H.shape[0]:
        raise ValidationError(f"X rows {X.shape[0]} != H rows {H.shape[0]}")
    if H.shape[1] != W_e.shape[0]:
        raise ValidationError(f"H cols {H.shape[1]} != edge weights "
                              f"{W_e.shape[0]}")
    basis = (H != 0).to(X.dtype) if binary_degrees else H
    d_v = basis @ W_e            # [N+L]
    d_e = basis.sum(dim=0)       # [E]
    if torch.isnan(d_v).any():
        bad = int(torch.nonzero(torch.isnan(d_v))[0])
        raise NumericError(f"NaN in vertex degree at node {bad}")
    if torch.isnan(d_e).any():
        bad = int(torch.nonzero(torch.isnan(d_e))[0])
        raise NumericError(f"NaN in edge degree at edge {bad}")
    d_v = torch.clamp(d_v, min=eps)
    d_e = torch.clamp(d_e, min=eps)
    inv_sqrt_v = d_v.rsqrt()
    msg = inv_sqrt_v.unsqueeze(1) * (H * W_e) @ (
        (H / d_e).T @ (inv_sqrt_v.unsqueeze(1) * X))
    return activation(msg @ theta)


class HypergraphStack(nn.Module):
    """Residual stack of hypergraph convolutions with learned positive
    diagonal edge weights (identity at init)."""

    def __init__(self, dim: int, layers: int = 2):
        super().__init__()
        self.thetas = nn.ParameterList(
            nn.Parameter(torch.empty(dim, dim)) for _ in range(layers))
        for theta in self.thetas:
            nn.init.xavier_uniform_(theta)
        self.edge_weight = nn.Linear(dim, 1)
        nn.init.zeros_(self.edge_weight.weight)
        nn.init.constant_(self.edge_weight.bias, math.log(math.expm1(1.0)))

    def forward(self, X: torch.Tensor, H: torch.Tensor,
                edge_features: torch.Tensor) -> torch.Tensor:
        w_e = F.softplus(self.edge_weight(edge_features).squeeze(1))
        for theta in self.thetas:
            X = X + hypergraph_conv(X, H, w_e, theta)
        return X


class PairwiseGCN(nn.Module):
    """Ablation substitute: two symmetric-normalized graph convolutions
    over the complete bipartite visual-text graph with self-loops."""

    def __init__(self, dim: int, layers: int = 2):
        super().__init__()
        self.weights = nn.ParameterList(
            nn.Parameter(torch.empty(dim, dim)) for _ in range(layers))
        for w in self.weights:
            nn.init.xavier_uniform_(w)

    def forward(self, X: torch.Tensor, n_visual: int) -> torch.Tensor:
        total = X.shape[0]
        adj = torch.zeros(total, total, dtype=X.dtype)
        adj[:n_visual, n_visual:] = 1.0
        adj[n_visual:, :n_visual] = 1.0
        adj = adj + torch.eye(total, dtype=X.dtype)
        inv_sqrt = adj.sum(dim=1).rsqrt()
        norm = inv_sqrt.unsqueeze(1) * adj * inv_sqrt.unsqueeze(0)
        for w in self.weights:
            X = F.elu(norm @ X @ w)
        return X


class MLDBlock(nn.Module):
    """One multi-layer dynamic attention block: four scaled dot-product
    maps between and within modalities, residual value mixing, and no
    output projection."""

    def __init__(self, dim: int, heads: int = 4, dropout: float = 0.2):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.drop = nn.Dropout(dropout)
        self.q_v = nn.Linear(dim, dim, bias=False)
        self.k_v = nn.Linear(dim, dim, bias=False)
        self.v_v = nn.Linear(dim, dim, bias=False)
        self.q_t = nn.Linear(dim, dim, bias=False)
        self.k_t = nn.Linear(dim, dim, bias=False)
        self.v_t = nn.Linear(dim, dim, bias=False)
        init_linear(self)

    def _split(self, x):
        n, dim = x.shape
        return x.reshape(n, self.heads, dim // self.heads).transpose(0, 1)

    def _attend(self, q, k):
        scale = 1.0 / math.sqrt(q.shape[-1])
        return self.drop(torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1))

    def forward(self, O_v: torch.Tensor, O_t: torch.Tensor):
        qv, kv, vv = (self._split(f(O_v))
                      for f in (self.q_v, self.k_v, self.v_v))
        qt, kt, vt = (self._split(f(O_t))
                      for f in (self.q_t, self.k_t, self.v_t))
        a_vv = self._attend(qv, kv)
        a_vt = self._attend(qv, kt)
        a_tt = self._attend(qt, kt)
        a_tv = self._attend(qt, kv)

        def merge(y):
            return y.transpose(0, 1).reshape(y.shape[1], -1)

        o_v = merge(a_vv @ vv) + merge(a_vt @ vt) + O_v
        o_t = merge(a_tt @ vt) + merge(a_tv @ vv) + O_t
        return o_v, o_t

    def attention_maps(self, O_v, O_t):
        """The four per-head maps, for normalization checks and plots."""
        qv, kv = self._split(self.q_v(O_v)), self._split(self.k_v(O_v))
        qt, kt = self._split(self.q_t(O_t)), self._split(self.k_t(O_t))
        scale_v = 1.0 / math.sqrt(qv.shape[-1])
        return {
            "A_vv": torch.softmax(qv @ kv.transpose(1, 2) * scale_v, dim=-1),
            "A_vt": torch.softmax(qv @ kt.transpose(1, 2) * scale_v, dim=-1),
            "A_tt": torch.softmax(qt @ kt.transpose(1, 2) * scale_v, dim=-1),
            "A_tv": torch.softmax(qt @ kv.transpose(1, 2) * scale_v, dim=-1),
        }


class MLDAttention(nn.Module):
    """Stack of MLD blocks; the per-block visual outputs are concatenated,
    passed through GELU, and fused to the final feature F_out."""

    def __init__(self, dim: int, blocks: int = 6, heads: int = 4,
                 dropout: float = 0.2):
        super().__init__()
        if blocks < 1:
            raise ConfigError(f"need >= 1 MLD block, got {blocks}")
        self.blocks = nn.ModuleList(MLDBlock(dim, heads, dropout)
                                    for _ in range(blocks))
        self.fuse = nn.Linear(blocks * dim, dim)
        init_linear(self)

    def forward(self, O_v: torch.Tensor, O_t: torch.Tensor) -> torch.Tensor:
        collected = []
        for block in self.blocks:
            O_v, O_t = block(O_v, O_t)
            collected.append(O_v)
        return self.fuse(F.gelu(torch.cat(collected, dim=1)))


@dataclasses.dataclass
class GroundingOutput:
    probs: torch.Tensor   # [N] simplex over visual nodes
    box: torch.Tensor     # [4] normalized x0, y0, x1, y1
    S_lat: torch.Tensor   # [H', W'] mask logits


class GroundHead(nn.Module):
    """Scores visual nodes, decodes a box as the probability-weighted
    object box refined by center/size offsets from the argmax node, and
    deconvolves a mask-logit map from the probability-pooled feature."""

    def __init__(self, dim: int, grid: int = 12):
        super().__init__()
        if grid % 4:
            raise ConfigError(f"mask head needs a grid divisible by 4, "
                              f"got {grid}")
        self.grid = grid
        self.score = nn.Linear(dim, 1)
        self.offset = nn.Linear(dim, 4)
        self.mask_base = nn.Linear(dim, 8 * (grid // 4) * (grid // 4))
        self.deconv1 = nn.ConvTranspose2d(8, 8, 3, stride=2, padding=1,
                                          output_padding=1)
        self.deconv2 = nn.ConvTranspose2d(8, 1, 3, stride=2, padding=1,
                                          output_padding=1)
        init_linear(self)

    def forward(self, feats: torch.Tensor, boxes: torch.Tensor
                ) -> GroundingOutput:
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValidationError("ground() needs >= 1 visual node")
        if boxes.shape[0] != feats.shape[0]:
            raise ValidationError(f"{feats.shape[0]} nodes but "
                                  f"{boxes.shape[0]} boxes")
        probs = torch.softmax(self.score(feats).squeeze(1), dim=0)
        base = probs @ boxes  # convex combination stays a valid box
        # offsets act in center/size space so x0<x1, y0<y1 survives
        raw = 0.1 * torch.tanh(self.offset(feats[int(probs.argmax())]))
        cx = (base[0] + base[2]) / 2 + raw[0]
        cy = (base[1] + base[3]) / 2 + raw[1]
        w = (base[2] - base[0]) * torch.exp(raw[2])
        h = (base[3] - base[1]) * torch.exp(raw[3])
        box = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        pooled = probs @ feats
        side = self.grid // 4
        fmap = self.mask_base(pooled).reshape(1, 8, side, side)
        fmap = F.gelu(self.deconv1(fmap))
        logits = self.deconv2(fmap)[0, 0]
        return GroundingOutput(probs=probs, box=box, S_lat=logits)
