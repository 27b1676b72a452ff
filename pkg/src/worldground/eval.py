"""Metrics, ablation harness, and latency benchmarking.

Accuracy is IoU@threshold against the target object's box, with IoU
computed by oracle.iou so the whole codebase shares one definition.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np
import torch

from . import oracle, trainer
from .errors import ConfigError, ValidationError
from .model import ABLATIONS, GroundingModel
from .scenesynth import TAGS

FULL_SCALE_REFERENCE = ("reference (full-scale, A40 GPU, not comparable): "
                       "135.81M params / 39 ms")


def _as_model(model_or_path):
    if isinstance(model_or_path, GroundingModel):
        return model_or_path
    return trainer.load_checkpoint(model_or_path).model


def _box_list(box) -> list:
    if isinstance(box, torch.Tensor):
        return [float(v) for v in box.detach().reshape(-1)]
    return [float(v) for v in box]


def evaluate(model_or_path, samples, cfg, iou_threshold: float = 0.5,
             predictor=None, prepped=None) -> dict:
    """Scores box predictions over a sample list.

    Returns {count, accuracy, mean_iou, node_accuracy, splits: {tag: ...}}.
    `predictor` (sample -> box) replaces the model's box output when
    given; node accuracy is only reported for model-backed runs since an
    external predictor has no node scores.
    """
    if not samples:
        raise ValidationError("cannot evaluate an empty dataset")
    if not 0 < iou_threshold < 1:
        raise ConfigError(f"iou_threshold must lie in (0, 1), got "
                          f"{iou_threshold}")
    model = None
    if predictor is None:
        model = _as_model(model_or_path)
        model.eval()
        if prepped is None:
            prepped = trainer.prepare_samples(samples, cfg)

    overall = {"count": 0, "hits": 0, "iou_sum": 0.0,
               "node_hits": 0}
    per_tag = {tag: dict(overall) for tag in TAGS}

    with torch.no_grad():
        for i, sample in enumerate(samples):
            node_ok = None
            if predictor is not None:
                box = _box_list(predictor(sample))
            else:
                out = model(prepped[i])
                box = _box_list(out.grounding.box)
                node_ok = (int(out.grounding.probs.argmax())
                           == sample.target_index)
            gt = sample.objects[sample.target_index].box
            iou = oracle.iou(box, gt)
            buckets = [overall] + [per_tag[t] for t in sample.split_tags
                                   if t in per_tag]
            for b in buckets:
                b["count"] += 1
                b["iou_sum"] += iou
                b["hits"] += int(iou >= iou_threshold)
                if node_ok is not None:
                    b["node_hits"] += int(node_ok)

    def finish(b):
        n = b["count"]
        out = {"count": n,
               "accuracy": round(b["hits"] / n, 6) if n else 0.0,
               "mean_iou": round(b["iou_sum"] / n, 6) if n else 0.0}
        if predictor is None:
            out["node_accuracy"] = (round(b["node_hits"] / n, 6)
                                    if n else 0.0)
        return out

    report = finish(overall)
    report["iou_threshold"] = iou_threshold
    report["splits"] = {tag: finish(b) for tag, b in per_tag.items()
                        if b["count"]}
    return report


def report_to_json(report: dict) -> str:
    """Canonical serialization: identical reports give identical bytes."""
    return json.dumps(report, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# ablation harness


def train_and_eval(train_samples, val_samples, cfg, seed: int,
                   ablations=(), log=None) -> dict:
    """One full two-stage run followed by evaluation; the unit of work
    for ablations and sweeps."""
    torch.manual_seed(seed)
    model = GroundingModel.from_config(cfg, ablations=ablations)
    prepped = trainer.prepare_samples(train_samples, cfg)
    stage1 = trainer.train_stage1(train_samples, cfg, seed=seed,
                                  model=model, log=log, prepped=prepped)
    stage2 = trainer.train_stage2(train_samples, cfg, stage1.model,
                                  seed=seed, log=log, prepped=prepped)
    report = evaluate(stage2.model, val_samples, cfg,
                      iou_threshold=cfg["eval.iou_threshold"])
    report["stage1_losses"] = [round(x, 6) for x in stage1.epoch_losses]
    report["stage2_losses"] = [round(x, 6) for x in stage2.epoch_losses]
    return report


def ablate(train_samples, val_samples, cfg, ablations,
           seeds=(0, 1, 2), log=None) -> dict:
    """Trains the full model plus each named ablation under identical
    seeds and budget; reports per-seed and seed-mean metrics."""
    bad = set(ablations) - set(ABLATIONS)
    if bad:
        raise ConfigError(f"unknown ablations: {sorted(bad)}")
    variants = [("full", ())]
    variants += [(name, (name,)) for name in ablations]
    table = {}
    for name, abls in variants:
        runs = []
        for seed in seeds:
            report = train_and_eval(train_samples, val_samples, cfg,
                                    seed, ablations=abls, log=log)
            runs.append(report)
        entry = {
            "seeds": list(seeds),
            "accuracy_per_seed": [r["accuracy"] for r in runs],
            "mean_accuracy": round(
                float(np.mean([r["accuracy"] for r in runs])), 6),
            "mean_iou": round(
                float(np.mean([r["mean_iou"] for r in runs])), 6),
        }
        split_means = {}
        for tag in TAGS:
            accs = [r["splits"][tag]["accuracy"] for r in runs
                    if tag in r["splits"]]
            if accs:
                split_means[tag] = round(float(np.mean(accs)), 6)
        entry["split_mean_accuracy"] = split_means
        table[name] = entry
    return table


# ---------------------------------------------------------------------------
# latency


def benchmark_latency(model_or_path, samples, cfg, n_samples: int = 256,
                      warmup: int = 16) -> dict:
    """Per-sample forward latency over `n_samples` timed passes (after
    `warmup` discarded ones), cycling through the given scenes."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    if not samples:
        raise ValidationError("benchmark needs at least one sample")
    model = _as_model(model_or_path)
    model.eval()
    prepped = trainer.prepare_samples(samples, cfg)
    times = []
    with torch.no_grad():
        for i in range(warmup + n_samples):
            item = prepped[i % len(prepped)]
            t0 = time.perf_counter()
            model(item)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    arr = np.asarray(times)
    return {
        "n_samples": int(n_samples),
        "mean_ms": round(float(arr.mean()), 3),
        "p50_ms": round(float(np.percentile(arr, 50)), 3),
        "p95_ms": round(float(np.percentile(arr, 95)), 3),
        "param_count": sum(p.numel() for p in model.parameters()),
        "reference": FULL_SCALE_REFERENCE,
    }
