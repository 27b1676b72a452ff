"""The full grounding model: encoders, spatial-aware world model, and the
hypergraph decoder, with the ablation variants used by the evaluation
harness (no_depth_prior, no_rollout, no_sawm, gcn_decoder).

Forward passes are per-sample (no batch axis); the trainer sums losses
over a batch before stepping.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from . import backbones, hyperdecoder, losses, sawm
from .errors import ConfigError

ABLATIONS = ("no_depth_prior", "no_rollout", "no_sawm", "gcn_decoder")


@dataclasses.dataclass
class Prepped:
    """Static per-sample tensors, computed once and reused each epoch."""
    image: torch.Tensor        # [3, H, W]
    tokens: torch.Tensor       # [L] int64
    F_d: torch.Tensor          # [H', W'] with +inf sky sentinels
    objects: backbones.ObjectSet
    boxes: torch.Tensor        # [N, 4]
    target_index: int
    gt_box: torch.Tensor       # [4]
    mask_small: torch.Tensor   # [H', W'] downsampled gt mask in [0, 1]
    split_tags: tuple = ()
    foot_masks: torch.Tensor = None   # [N, P_v] bool patch footprints
    obj_static: torch.Tensor = None   # [N, .] kind/color/geometry columns


@dataclasses.dataclass
class ForwardOut:
    saliency_maps: torch.Tensor          # [n_maps, P_v] in [0, 1]
    grounding: hyperdecoder.GroundingOutput
    states: list                         # rolled latent states


class GroundingModel(nn.Module):
    def __init__(self, dim: int = 64, state_dim: int = 64, patch: int = 8,
                 grid: int = 12, encoder_blocks: int = 2,
                 encoder_heads: int = 4, cross_modal_layers: int = 3,
                 rollout_horizon: int = 4, prior_hidden: int = 16,
                 scalar_prior: bool = False, hyperedge_k: int = 6,
                 hypergraph_layers: int = 2, mld_blocks: int = 6,
                 mld_heads: int = 4, mld_dropout: float = 0.2,
                 depth_alpha: float = 0.05, ablations=()):
        super().__init__()
        bad = set(ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablations: {sorted(bad)}")
        self.ablations = frozenset(ablations)
        self.grid = grid
        self.hyperedge_k = hyperedge_k
        self.rollout_horizon = 0 if "no_rollout" in self.ablations \
            else rollout_horizon
        self.depth_alpha = depth_alpha

        self.visual = backbones.VisualEncoder(dim, patch, encoder_blocks,
                                              encoder_heads, grid)
        self.text = backbones.TextEncoder(dim, encoder_blocks, encoder_heads)
        self.objects = backbones.ObjectEncoder(dim)

        if "no_sawm" in self.ablations:
            self.direct_proj = nn.Linear(dim, state_dim)
            backbones.init_linear(self.direct_proj)
        else:
            self.prior = backbones.DepthPrior(prior_hidden, scalar_prior)
            feat_dim = self.prior.feat_dim
            self.cross = sawm.CrossModalStack(dim, cross_modal_layers,
                                              feat_dim)
            self.state = sawm.CurrentState(dim, state_dim)
            self.transition = sawm.RolloutTransition(state_dim, dim)
        self.step_head = nn.Linear(state_dim, 1)
        backbones.init_linear(self.step_head)

        self.node_v = nn.Linear(state_dim, state_dim)
        self.node_t = nn.Linear(dim, state_dim)
        self.node_norm = nn.LayerNorm(state_dim)
        backbones.init_linear(self.node_v)
        backbones.init_linear(self.node_t)
        if "gcn_decoder" in self.ablations:
            self.gcn = hyperdecoder.PairwiseGCN(state_dim,
                                                hypergraph_layers)
        else:
            self.affinity = hyperdecoder.AffinityHead(state_dim)
            self.incidence = hyperdecoder.IncidenceAttention(state_dim)
            self.hgraph = hyperdecoder.HypergraphStack(state_dim,
                                                       hypergraph_layers)
        self.mld = hyperdecoder.MLDAttention(state_dim, mld_blocks,
                                             mld_heads, mld_dropout)
        self.ground = hyperdecoder.GroundHead(state_dim, grid)

    @classmethod
    def from_config(cls, cfg, ablations=()):
        grid = cfg["data.image_size"] // cfg["model.patch"]
        return cls(dim=cfg["model.dim"], state_dim=cfg["model.state_dim"],
                   patch=cfg["model.patch"], grid=grid,
                   encoder_blocks=cfg["model.encoder_blocks"],
                   encoder_heads=cfg["model.encoder_heads"],
                   cross_modal_layers=cfg["model.cross_modal_layers"],
                   rollout_horizon=cfg["model.rollout_horizon"],
                   prior_hidden=cfg["model.prior_hidden"],
                   scalar_prior=cfg["model.scalar_prior"],
                   hyperedge_k=cfg["hyperedge_k"],
                   hypergraph_layers=cfg["model.hypergraph_layers"],
                   mld_blocks=cfg["model.mld_blocks"],
                   mld_heads=cfg["model.mld_heads"],
                   mld_dropout=cfg["model.mld_dropout"],
                   depth_alpha=cfg["depth.alpha"], ablations=ablations)

    # ------------------------------------------------------------------

    def _paint(self, z: torch.Tensor, boxes, masks) -> torch.Tensor:
        logits = self.step_head(z).squeeze(1)
        grid_map = sawm.paint_object_scores(logits, boxes,
                                            (self.grid, self.grid),
                                            masks=masks)
        return torch.sigmoid(grid_map)

    def forward(self, prepped: Prepped,
                need_grounding: bool = True) -> ForwardOut:
        f_v_map = self.visual(prepped.image)
        f_c = self.text(prepped.tokens)
        return self._tail(prepped, f_v_map, f_c, need_grounding)

    def _tail(self, prepped: Prepped, f_v_map, f_c,
              need_grounding: bool) -> ForwardOut:
        dim, gh, gw = f_v_map.shape
        f_v = f_v_map.reshape(dim, gh * gw).T
        boxes = prepped.objects.boxes
        masks = prepped.foot_masks
        if masks is None:
            masks = backbones.footprint_masks(boxes, gh, gw)

        if "no_sawm" in self.ablations:
            f_o = self.objects(prepped.objects, f_v_map,
                               static=prepped.obj_static, masks=masks)
            z0 = self.direct_proj(f_o)
            states = []
            maps = [self._paint(z0, boxes, masks)]
            text_nodes_in = f_c
        else:
            if "no_depth_prior" in self.ablations:
                prior_feat = torch.ones(gh * gw, self.prior.feat_dim,
                                        dtype=f_v.dtype)
            else:
                prior_feat = self.prior(prepped.F_d,
                                        self.depth_alpha).feat
            scores, last_maps, _, f_c_out = self.cross(f_v, f_c, prior_feat)
            f_o = self.objects(prepped.objects, f_v_map,
                               static=prepped.obj_static, masks=masks)
            _, per_region = sawm.region_pool(scores, boxes, (gh, gw),
                                             masks=masks)
            z0 = self.state(f_o, per_region)
            states = sawm.rollout(self.transition, z0, last_maps.O_t,
                                  self.rollout_horizon)
            maps = [torch.sigmoid(s) for s in scores]
            maps.extend(self._paint(z, boxes, masks)
                        for z in [z0] + states)
            text_nodes_in = f_c_out

        if not need_grounding:
            # stage-1 training only consumes the saliency maps, so the
            # decoder forward is skipped entirely
            return ForwardOut(saliency_maps=torch.stack(maps),
                              grounding=None, states=states)

        all_states = [z0] + states
        z_repr = torch.stack(all_states).mean(dim=0)
        vis_nodes = self.node_norm(self.node_v(z_repr))
        txt_nodes = self.node_norm(self.node_t(text_nodes_in))

        if "gcn_decoder" in self.ablations:
            nodes = torch.cat([vis_nodes, txt_nodes])
            fused = self.gcn(nodes, vis_nodes.shape[0])
        else:
            length = txt_nodes.shape[0]
            # command length can undershoot the configured edge size
            k = min(self.hyperedge_k, length)
            aff = self.affinity(vis_nodes, txt_nodes)
            members, e_feats = hyperdecoder.build_hyperedges(
                aff, txt_nodes, k)
            nodes = torch.cat([vis_nodes, txt_nodes])
            h_inc, _ = self.incidence(nodes, e_feats, members,
                                      vis_nodes.shape[0])
            fused = self.hgraph(nodes, h_inc, e_feats)
        n = vis_nodes.shape[0]
        f_out = self.mld(fused[:n], fused[n:])
        grounding = self.ground(f_out, prepped.boxes)
        return ForwardOut(saliency_maps=torch.stack(maps),
                          grounding=grounding, states=states)

    def forward_batch(self, items, need_grounding: bool = True) -> list:
        """Encodes a list of Prepped jointly (images as one batch, token
        runs grouped by length) and finishes per sample. Faster than
        looping forward(); the math is the same."""
        images = torch.stack([p.image for p in items])
        f_v_maps = self.visual(images)
        f_cs = [None] * len(items)
        by_len = {}
        for i, p in enumerate(items):
            by_len.setdefault(p.tokens.shape[0], []).append(i)
        for _, idxs in sorted(by_len.items()):
            stacked = self.text(torch.stack([items[i].tokens
                                             for i in idxs]))
            for row, i in enumerate(idxs):
                f_cs[i] = stacked[row]
        return [self._tail(p, f_v_maps[i], f_cs[i], need_grounding)
                for i, p in enumerate(items)]

    def predict_box(self, prepped: Prepped) -> torch.Tensor:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self.forward(prepped)
        if was_training:
            self.train()
        return out.grounding.box


def prep_sample(sample, sample_index: int = 0, patch: int = 8,
                noise_sigma: float = 0.0, grid: int = 12,
                object_mode: str = "oracle") -> Prepped:
    """Builds the static tensors for one scene; depth noise is seeded by
    the sample index so regeneration is exact."""
    image = torch.from_numpy(np.ascontiguousarray(sample.image))
    tokens = torch.tensor(list(sample.command), dtype=torch.int64)
    f_d = backbones.provide_depth(sample, noise_sigma, patch,
                                  seed=sample_index)
    objects = backbones.provide_objects(sample, object_mode)
    boxes = torch.tensor(objects.boxes, dtype=torch.float32)
    gt_box = torch.tensor(sample.objects[sample.target_index].box,
                          dtype=torch.float32)
    mask_small = losses.downsample_mask(
        torch.from_numpy(np.ascontiguousarray(sample.gt_mask)),
        (grid, grid))
    return Prepped(image=image, tokens=tokens, F_d=f_d, objects=objects,
                   boxes=boxes, target_index=sample.target_index,
                   gt_box=gt_box, mask_small=mask_small,
                   split_tags=tuple(sample.split_tags),
                   foot_masks=backbones.footprint_masks(objects.boxes,
                                                        grid, grid),
                   obj_static=backbones.ObjectEncoder.static_features(
                       objects))
