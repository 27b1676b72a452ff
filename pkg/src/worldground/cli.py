"""Command-line entry point.

Exit codes: 0 success, 1 bad input (config/validation), 2 numeric
failure (NaN, failed gradient check). Every failure path prints a
single machine-readable line starting with `ERR:<code>:`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as config_mod
from . import eval as eval_mod
from . import gradcheck, scenesynth, trainer, viz
from .errors import ConfigError, NumericError, ValidationError
from .model import ABLATIONS, GroundingModel, prep_sample
from .scenesynth import SceneError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is usage + 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _load_config(args) -> config_mod.Config:
    return config_mod.load_config(getattr(args, "config", None))


def _config_from_checkpoint(path, args) -> config_mod.Config:
    """Explicit --config wins; otherwise use the one stored in the
    checkpoint so shapes always line up."""
    if getattr(args, "config", None) is not None:
        return config_mod.load_config(args.config)
    stored = trainer.load_checkpoint(path).meta.get("config") or {}
    if not stored:
        return config_mod.load_config(None)
    cfg = config_mod.Config(stored)
    cfg.validate()
    return cfg


def _require(value, flag: str, command: str):
    if value is None:
        raise ConfigError(f"{command} needs {flag}")
    return value


def _synth_config(cfg: config_mod.Config) -> scenesynth.SynthConfig:
    return scenesynth.SynthConfig(image_size=cfg["data.image_size"],
                                  min_objects=cfg["data.min_objects"],
                                  max_objects=cfg["data.max_objects"])


def _log_writer(path):
    if path is None:
        return None
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    handle = open(path, "a", encoding="utf-8")

    def write(record: dict):
        handle.write(json.dumps(record, sort_keys=True) + "\n")
        handle.flush()

    return write


def _parse_ablations(raw) -> tuple:
    if not raw:
        return ()
    names = tuple(a.strip() for a in raw.split(",") if a.strip())
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; known: "
                              + ", ".join(ABLATIONS))
    return names


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    out = _require(args.out, "--out", "gen-data")
    cfg = _load_config(args)
    synth = _synth_config(cfg)
    n_train = args.train if args.train is not None \
        else cfg["data.train_samples"]
    n_val = args.val if args.val is not None else cfg["data.val_samples"]
    n_test = args.test if args.test is not None \
        else cfg["data.val_samples"]
    manifest = scenesynth.generate_dataset(n_train, n_val, n_test, synth,
                                           args.seed, out)
    for split, info in sorted(manifest["splits"].items()):
        print(f"{split}: {info['count']} samples "
              f"{json.dumps(info['tag_counts'], sort_keys=True)}")
    print(f"wrote {out}/manifest.json")
    return 0


def cmd_train(args) -> int:
    if args.stage not in ("1", "2", "both"):
        raise ConfigError(f"stage must be 1, 2, or both, "
                          f"got {args.stage!r}")
    data = _require(args.data, "--data", "train")
    cfg = _load_config(args)
    result = trainer.train_pipeline(
        data, cfg, seed=args.seed, stage=args.stage,
        out_dir=args.out or data, ablations=_parse_ablations(args.ablate),
        log=_log_writer(args.log))
    for key in ("stage1_losses", "stage2_losses"):
        if key in result:
            losses = result[key]
            print(f"{key[:6]} epochs={len(losses)} "
                  f"first={losses[0]:.4f} last={losses[-1]:.4f}")
    for key in ("stage1_checkpoint", "stage2_checkpoint"):
        if key in result:
            print(f"wrote {result[key]}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _require(args.ckpt, "--ckpt", "eval")
    data = _require(args.data, "--data", "eval")
    cfg = _config_from_checkpoint(ckpt, args)
    samples = scenesynth.load_split(data, args.split)
    report = eval_mod.evaluate(ckpt, samples, cfg,
                               iou_threshold=args.iou_threshold)
    print(eval_mod.report_to_json(report))
    return 0


def cmd_ablate(args) -> int:
    data = _require(args.data, "--data", "ablate")
    cfg = _load_config(args)
    train_samples = scenesynth.load_split(data, "train")
    val_samples = scenesynth.load_split(data, args.split)
    ablations = _parse_ablations(args.ablations)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = eval_mod.ablate(train_samples, val_samples, cfg, ablations,
                             seeds=seeds)
    text = eval_mod.report_to_json(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_all(points=args.points,
                                tolerance=args.tolerance, seed=args.seed)
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:22s} worst_rel_err={r.worst_rel_err:.3e} "
              f"[{status}]")
    bad = [r.name for r in reports if not r.passed]
    if bad:
        raise NumericError("gradient check failed for: "
                           + ", ".join(bad))
    print(f"all {len(reports)} ops within {args.tolerance:g}")
    return 0


def cmd_bench(args) -> int:
    ckpt = _require(args.ckpt, "--ckpt", "bench")
    data = _require(args.data, "--data", "bench")
    cfg = _config_from_checkpoint(ckpt, args)
    samples = scenesynth.load_split(data, args.split)
    report = eval_mod.benchmark_latency(ckpt, samples, cfg,
                                        n_samples=args.n,
                                        warmup=args.warmup)
    print(eval_mod.report_to_json(report))
    return 0


def cmd_visualize(args) -> int:
    ckpt = _require(args.ckpt, "--ckpt", "visualize")
    sample_path = _require(args.sample, "--sample", "visualize")
    out = _require(args.out, "--out", "visualize")
    cfg = _config_from_checkpoint(ckpt, args)
    model = trainer.load_checkpoint(ckpt).model
    sample = scenesynth.read_sample(sample_path)
    prepped = prep_sample(sample, patch=cfg["model.patch"],
                          noise_sigma=cfg["depth.noise_sigma"],
                          grid=cfg["data.image_size"] // cfg["model.patch"])
    paths = viz.render_sample(model, prepped, sample, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_config(args) -> int:
    cfg = _load_config(args)
    for line in cfg.dump_lines():
        print(line)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="worldground",
                     description="command-conditioned visual grounding "
                                 "on synthetic driving scenes")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None,
                       help="flat key = value config file")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset")
    p.add_argument("--out", default=None, help="dataset directory")
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)

    p = add("train", cmd_train, "run the two-stage pipeline")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None, help="checkpoint directory")
    p.add_argument("--stage", default="both",
                   help="1, 2, or both (default both)")
    p.add_argument("--ablate", default="",
                   help="comma-separated ablation names")
    p.add_argument("--log", default=None,
                   help="append per-step JSON records here")

    p = add("eval", cmd_eval, "score a checkpoint on a split")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--iou-threshold", type=float, default=0.5)

    p = add("ablate", cmd_ablate, "train and score ablated variants")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--ablations", default="no_rollout,no_sawm")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default=None, help="write the JSON report")

    p = add("gradcheck", cmd_gradcheck,
            "compare analytic and numeric gradients")
    p.add_argument("--points", type=int, default=gradcheck.POINTS)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)

    p = add("bench", cmd_bench, "measure per-sample inference latency")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--warmup", type=int, default=16)

    p = add("visualize", cmd_visualize,
            "render depth/saliency/rollout panels for one sample")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sample", default=None, help="a .wgnd sample file")
    p.add_argument("--out", default=None, help="panel directory")

    p = add("config", cmd_config, "print resolved config with sources")
    p.add_argument("--dump", action="store_true",
                   help="print every key (default behavior)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"ERR:usage: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ERR:config: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, SceneError) as exc:
        print(f"ERR:validation: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"ERR:io: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"ERR:numeric: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
