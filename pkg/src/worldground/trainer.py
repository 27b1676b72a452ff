"""Two-stage training: world-model rollout pretraining (stage 1), then
grounding supervision with a residual rollout term (stage 2). Batching,
augmentation, and initialization are all seeded, so a (seed, dataset,
config) triple reproduces runs exactly on one platform.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time

import numpy as np
import torch

from . import losses, scenesynth, tensorio
from .errors import ConfigError, NumericError
from .model import GroundingModel, Prepped, prep_sample
from .rng import Rng

CHECKPOINT_VERSION = 1

def zero_grad_exceptions(model) -> set:
    """Parameter names whose loss path is structurally zero on the first
    optimizer step of a freshly initialized model.

    Three causes. (1) The saliency functional starts at zero (a = 0), so
    nothing that only feeds the saliency score sees gradient yet: mu and
    sigma, the depth-prior trunk, and the last cross-modal layer's
    text-side attention (its O_v feeds only the discarded final F_v and
    the saliency alignment). (2) The transition delta ends in a zeroed
    layer, blanking the gate and the delta's own first layer. (3) Some
    paths are dead permanently: the prior's scalar head in vector mode,
    the affinity head (hyperedge selection is a hard top-k, which passes
    no gradient), and the last MLD block's text-side query (its text
    output is never consumed).
    """
    names = set()
    if hasattr(model, "cross"):
        last = len(model.cross.layers) - 1
        names |= {f"cross.layers.{last}.w_q_tex.weight",
                  f"cross.layers.{last}.w_k_vis.weight",
                  f"cross.layers.{last}.w_v_tex.weight",
                  "cross.saliency.mu_raw", "cross.saliency.sigma_raw",
                  "transition.gate.weight", "transition.gate.bias",
                  "transition.delta.0.weight", "transition.delta.0.bias"}
    if hasattr(model, "prior"):
        names |= {"prior.fc1.weight", "prior.fc1.bias"}
        if not model.prior.scalar_mode or "no_depth_prior" in model.ablations:
            names |= {"prior.fc2.weight", "prior.fc2.bias"}
    if hasattr(model, "affinity"):
        names |= {"affinity.w_v.weight", "affinity.w_t.weight",
                  "affinity.a_v", "affinity.a_t"}
    if hasattr(model, "transition") and model.rollout_horizon == 0:
        names |= {n for n, _ in model.named_parameters()
                  if n.startswith("transition.")}
    last_mld = len(model.mld.blocks) - 1
    names.add(f"mld.blocks.{last_mld}.q_t.weight")
    return names


def lr_at(step: int, total_steps: int, cfg) -> float:
    """Linear 0 -> lr over the warmup fraction, constant afterwards."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    lr = cfg["train.lr"]
    warmup = cfg["train.warmup_fraction"] * total_steps
    if warmup <= 0 or step >= warmup:
        return float(lr)
    return float(lr * step / warmup)


def build_optimizer(model: torch.nn.Module, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg["train.lr"],
                             betas=(0.9, 0.999),
                             weight_decay=cfg["train.weight_decay"])


# ---------------------------------------------------------------------------
# per-sample losses


def _stage1_loss_from(out, prepped: Prepped,
                      loss_cfg: losses.LossConfig) -> torch.Tensor:
    return losses.rollout_loss(out.saliency_maps,
                               prepped.mask_small.reshape(-1), loss_cfg)


def _stage2_loss_from(out, prepped: Prepped, loss_cfg: losses.LossConfig,
                      keep_rollout_weight: float) -> torch.Tensor:
    ground = out.grounding
    loss = losses.grounding_loss(
        ground.probs, prepped.target_index, torch.sigmoid(ground.S_lat),
        prepped.mask_small, ground.box, prepped.gt_box, loss_cfg)
    if keep_rollout_weight > 0:
        loss = loss + keep_rollout_weight * losses.rollout_loss(
            out.saliency_maps, prepped.mask_small.reshape(-1), loss_cfg)
    return loss


def stage1_loss(model: GroundingModel, prepped: Prepped,
                loss_cfg: losses.LossConfig) -> torch.Tensor:
    return _stage1_loss_from(model(prepped, need_grounding=False),
                             prepped, loss_cfg)


def stage2_loss(model: GroundingModel, prepped: Prepped,
                loss_cfg: losses.LossConfig,
                keep_rollout_weight: float) -> torch.Tensor:
    return _stage2_loss_from(model(prepped), prepped, loss_cfg,
                             keep_rollout_weight)


# ---------------------------------------------------------------------------
# the loop


@dataclasses.dataclass
class TrainResult:
    model: GroundingModel
    optimizer: torch.optim.AdamW
    step: int
    epoch_losses: list


def _batches(n: int, batch_size: int, rng: Rng):
    """Fixed-stride shards of a seeded permutation."""
    perm = rng.permutation(n)
    n_batches = max(1, math.ceil(n / batch_size))
    return [perm[b::n_batches] for b in range(n_batches)]


def _augmented(prepped: Prepped, sample, rng: Rng, prob: float) -> Prepped:
    mode = rng.choice(("keyword", "longtext", "ambiguity"))
    keywords = scenesynth.scene_keywords(sample.objects, sample.split_tags)
    command = scenesynth.augment_command(sample.command, mode, rng,
                                         prob=prob, keywords=keywords)
    if list(command) == list(sample.command):
        return prepped
    return dataclasses.replace(
        prepped, tokens=torch.tensor(command, dtype=torch.int64))


def _dump_diagnostics(out_dir, payload: dict) -> None:
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "diagnostics.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _run_stage(model, samples, prepped, cfg, seed: int, stage: int,
               epochs: int, log=None, out_dir=None) -> TrainResult:
    loss_cfg = losses.LossConfig.from_config(cfg)
    keep = cfg["stage2.keep_rollout_weight"]
    batch_size = cfg["train.batch_size"]
    optimizer = build_optimizer(model, cfg)
    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total_steps = max(1, steps_per_epoch * epochs)
    model.train()
    step = 0
    epoch_losses = []
    for epoch in range(epochs):
        batch_rng = Rng(seed, stream=(stage << 48) | (epoch + 1))
        aug_rng = Rng(seed, stream=(7 << 52) | (stage << 48) | (epoch + 1))
        epoch_total = 0.0
        for batch in _batches(n, batch_size, batch_rng):
            t0 = time.perf_counter()
            # 1-based so the very first step is not wasted at lr 0
            lr = lr_at(step + 1, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            items = []
            for idx in batch:
                item = prepped[idx]
                if stage == 2 and cfg["train.augment_prob"] > 0:
                    item = _augmented(item, samples[idx], aug_rng,
                                      cfg["train.augment_prob"])
                items.append(item)
            outs = model.forward_batch(items,
                                       need_grounding=(stage == 2))
            total = None
            for out, item in zip(outs, items):
                if stage == 1:
                    loss = _stage1_loss_from(out, item, loss_cfg)
                else:
                    loss = _stage2_loss_from(out, item, loss_cfg, keep)
                total = loss if total is None else total + loss
            total = total / len(batch)
            if not torch.isfinite(total):
                _dump_diagnostics(out_dir, {
                    "stage": stage, "step": step, "epoch": epoch,
                    "lr": lr, "batch": [int(i) for i in batch],
                    "loss": repr(total.item())})
                raise NumericError(f"non-finite loss {total.item()!r} at "
                                   f"stage {stage} step {step} "
                                   f"(diagnostics dumped)")
            total.backward()
            optimizer.step()
            step += 1
            epoch_total += float(total.item()) * len(batch)
            if log is not None:
                log({"step": step, "epoch": epoch + 1,
                     "loss": round(float(total.item()), 6), "lr": lr,
                     "wall_ms": round((time.perf_counter() - t0) * 1e3, 2)})
        epoch_losses.append(epoch_total / n)
    return TrainResult(model=model, optimizer=optimizer, step=step,
                       epoch_losses=epoch_losses)


def train_stage1(samples, cfg, seed: int = 0, model=None, ablations=(),
                 log=None, out_dir=None, prepped=None) -> TrainResult:
    if not samples:
        raise ConfigError("training dataset is empty")
    if model is None:
        torch.manual_seed(seed)
        model = GroundingModel.from_config(cfg, ablations=ablations)
    prepped = prepped or prepare_samples(samples, cfg)
    return _run_stage(model, samples, prepped, cfg, seed, stage=1,
                      epochs=cfg["train.stage1_epochs"], log=log,
                      out_dir=out_dir)


def train_stage2(samples, cfg, model, seed: int = 0, log=None,
                 out_dir=None, prepped=None) -> TrainResult:
    if not samples:
        raise ConfigError("training dataset is empty")
    prepped = prepped or prepare_samples(samples, cfg)
    return _run_stage(model, samples, prepped, cfg, seed, stage=2,
                      epochs=cfg["train.stage2_epochs"], log=log,
                      out_dir=out_dir)


def prepare_samples(samples, cfg) -> list:
    grid = cfg["data.image_size"] // cfg["model.patch"]
    return [prep_sample(s, sample_index=i, patch=cfg["model.patch"],
                        noise_sigma=cfg["depth.noise_sigma"], grid=grid)
            for i, s in enumerate(samples)]


# ---------------------------------------------------------------------------
# checkpoints


def _int_bytes(value: int) -> np.ndarray:
    return np.frombuffer(int(value).to_bytes(8, "little"), dtype=np.uint8)


def _bytes_int(arr: np.ndarray) -> int:
    return int.from_bytes(arr.tobytes(), "little")


def save_checkpoint(path, model: GroundingModel,
                    optimizer: torch.optim.AdamW = None, step: int = 0,
                    cfg=None, seed: int = 0, stage: int = 0) -> None:
    meta = {"format_version": CHECKPOINT_VERSION,
            "config": cfg.as_dict() if cfg is not None else {},
            "ablations": sorted(model.ablations),
            "seed": seed, "stage": stage}
    entries = {
        "meta.json": np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"),
            dtype=np.uint8),
        "meta.step": _int_bytes(step),
    }
    state = optimizer.state if optimizer is not None else {}
    for name, param in model.named_parameters():
        entries[f"w.{name}"] = \
            param.detach().cpu().numpy().astype(np.float32)
        moments = state.get(param, {})
        exp_avg = moments.get("exp_avg")
        exp_avg_sq = moments.get("exp_avg_sq")
        opt_step = moments.get("step")
        zeros = np.zeros(param.shape, dtype=np.float32)
        entries[f"m1.{name}"] = (
            exp_avg.cpu().numpy().astype(np.float32)
            if exp_avg is not None else zeros)
        entries[f"m2.{name}"] = (
            exp_avg_sq.cpu().numpy().astype(np.float32)
            if exp_avg_sq is not None else zeros.copy())
        entries[f"ms.{name}"] = np.asarray(
            [float(opt_step) if opt_step is not None else 0.0],
            dtype=np.float32)
    tensorio.write_container(path, entries)


@dataclasses.dataclass
class LoadedCheckpoint:
    model: GroundingModel
    optimizer_moments: dict
    step: int
    meta: dict

    def build_optimizer(self, cfg) -> torch.optim.AdamW:
        opt = build_optimizer(self.model, cfg)
        for name, param in self.model.named_parameters():
            m = self.optimizer_moments.get(name)
            if m is None or m["step"] == 0:
                continue
            opt.state[param] = {
                "step": torch.tensor(m["step"]),
                "exp_avg": torch.from_numpy(m["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(m["exp_avg_sq"].copy()),
            }
        return opt


def load_checkpoint(path) -> LoadedCheckpoint:
    from .config import Config

    entries = tensorio.read_container(path)
    if "meta.json" not in entries:
        raise ConfigError(f"{path}: not a checkpoint (missing meta)")
    meta = json.loads(entries["meta.json"].tobytes().decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version "
                          f"{meta.get('format_version')}")
    cfg = Config(meta["config"])
    model = GroundingModel.from_config(cfg,
                                       ablations=tuple(meta["ablations"]))
    moments = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"w.{name}"
            if key not in entries:
                raise ConfigError(f"checkpoint missing tensor {key}")
            stored = entries[key]
            if tuple(stored.shape) != tuple(param.shape):
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint "
                    f"{tuple(stored.shape)} vs model {tuple(param.shape)}")
            param.copy_(torch.from_numpy(stored.copy()))
            moments[name] = {
                "exp_avg": entries[f"m1.{name}"],
                "exp_avg_sq": entries[f"m2.{name}"],
                "step": float(entries[f"ms.{name}"][0]),
            }
    step = _bytes_int(entries["meta.step"])
    return LoadedCheckpoint(model=model, optimizer_moments=moments,
                            step=step, meta=meta)


def train_pipeline(data_dir, cfg, seed: int = 0, stage: str = "both",
                   out_dir=None, ablations=(), log=None) -> dict:
    """CLI-facing orchestration: loads splits, runs the requested stages,
    writes stage checkpoints under out_dir. Returns paths and losses."""
    if stage not in ("1", "2", "both"):
        raise ConfigError(f"stage must be 1, 2, or both, got {stage!r}")
    samples = scenesynth.load_split(data_dir, "train")
    prepped = prepare_samples(samples, cfg)
    result = {}
    model = None
    if stage in ("1", "both"):
        torch.manual_seed(seed)
        model = GroundingModel.from_config(cfg, ablations=ablations)
        stage1 = train_stage1(samples, cfg, seed=seed, model=model,
                              log=log, out_dir=out_dir, prepped=prepped)
        result["stage1_losses"] = stage1.epoch_losses
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "stage1.wgnd")
            save_checkpoint(path, stage1.model, stage1.optimizer,
                            stage1.step, cfg, seed, stage=1)
            result["stage1_checkpoint"] = path
        model = stage1.model
    if stage in ("2", "both"):
        if model is None:
            ckpt_path = os.path.join(out_dir or data_dir, "stage1.wgnd")
            if not os.path.exists(ckpt_path):
                raise ConfigError(f"stage 2 needs a stage-1 checkpoint at "
                                  f"{ckpt_path}")
            model = load_checkpoint(ckpt_path).model
        stage2 = train_stage2(samples, cfg, model, seed=seed, log=log,
                              out_dir=out_dir, prepped=prepped)
        result["stage2_losses"] = stage2.epoch_losses
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "stage2.wgnd")
            save_checkpoint(path, stage2.model, stage2.optimizer,
                            stage2.step, cfg, seed, stage=2)
            result["stage2_checkpoint"] = path
    return result
