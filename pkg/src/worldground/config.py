"""Flat dotted-key configuration.

A config file is plain text, one `key = value` per line, `#` comments.
Every key has a default; an empty file is a valid config. Unknown keys are
rejected rather than ignored so typos fail loudly. Each default carries a
source tag: "reference" for values taken from the method we reimplement,
"chosen" for values we had to pick ourselves.
"""

from __future__ import annotations

import dataclasses

from .errors import ConfigError


@dataclasses.dataclass(frozen=True)
class _Entry:
    default: object
    source: str  # "reference" | "chosen"
    help: str


DEFAULTS = {
    # data generation
    "data.image_size": _Entry(96, "chosen", "square image side in pixels"),
    "data.min_objects": _Entry(3, "chosen", "min objects per ordinary scene"),
    "data.max_objects": _Entry(7, "chosen", "max objects per ordinary scene"),
    "data.train_samples": _Entry(2000, "chosen", "train split size"),
    "data.val_samples": _Entry(300, "chosen", "val split size"),
    # encoders
    "model.dim": _Entry(64, "chosen", "visual channel dim D (toy scale)"),
    "model.text_dim": _Entry(64, "chosen", "text hidden dim Q; must equal model.dim"),
    "model.patch": _Entry(8, "chosen", "visual patch size"),
    "model.encoder_blocks": _Entry(2, "chosen", "self-attention blocks per encoder"),
    "model.encoder_heads": _Entry(4, "chosen", "attention heads in the encoders"),
    "model.state_dim": _Entry(64, "chosen", "latent state dim D_z"),
    # cross-modal / world model
    "model.cross_modal_layers": _Entry(3, "reference", "cross-modal attention layers"),
    "model.rollout_horizon": _Entry(4, "chosen", "future states N rolled per sample"),
    "model.scalar_prior": _Entry(False, "chosen",
                                 "use the degenerate scalar depth-prior feature"),
    "model.prior_hidden": _Entry(16, "chosen", "depth prior MLP hidden width"),
    # hypergraph decoder
    "hyperedge_k": _Entry(6, "reference", "text nodes per hyperedge"),
    "model.hypergraph_layers": _Entry(2, "chosen", "hypergraph conv layers"),
    "model.mld_blocks": _Entry(6, "reference", "multi-layer dynamic attention blocks"),
    "model.mld_heads": _Entry(4, "chosen", "attention heads in MLD blocks"),
    "model.mld_dropout": _Entry(0.2, "reference", "dropout on MLD attention maps"),
    # depth
    "depth.alpha": _Entry(0.05, "chosen", "exponential decay rate for depth"),
    "depth.noise_sigma": _Entry(0.1, "chosen", "simulated depth estimation noise"),
    # losses
    "loss.alpha": _Entry(0.3, "chosen", "Tversky false-positive weight"),
    "loss.beta": _Entry(0.7, "chosen", "Tversky false-negative weight"),
    "loss.epsilon": _Entry(1.0, "chosen", "Tversky smoothing"),
    "loss.alpha_t": _Entry(0.25, "chosen", "focal class weight"),
    "loss.gamma": _Entry(2.0, "chosen", "focal exponent"),
    "loss.lambda_tve": _Entry(1.0, "chosen", "rollout loss Tversky weight"),
    "loss.lambda_foc": _Entry(1.0, "chosen", "rollout loss focal weight"),
    "loss.lambda_cls": _Entry(1.0, "chosen", "grounding classification weight"),
    "loss.lambda_reg": _Entry(5.0, "chosen", "grounding regression weight"),
    # training
    "train.stage1_epochs": _Entry(15, "reference", "world-model pretraining epochs"),
    "train.stage2_epochs": _Entry(40, "reference", "grounding supervision epochs"),
    "train.batch_size": _Entry(32, "reference", "samples per optimizer step"),
    "train.lr": _Entry(1e-4, "reference", "peak learning rate"),
    "train.warmup_fraction": _Entry(0.1, "reference", "fraction of steps spent ramping"),
    "train.augment_prob": _Entry(0.3, "reference", "command replacement probability"),
    "train.weight_decay": _Entry(0.01, "chosen", "decoupled weight decay"),
    "stage2.keep_rollout_weight": _Entry(0.1, "chosen",
                                         "residual stage-1 loss weight in stage 2"),
    # evaluation
    "eval.iou_threshold": _Entry(0.5, "reference", "IoU cutoff for accuracy"),
}


class Config:
    """Immutable view over resolved key/value pairs."""

    def __init__(self, values: dict):
        self._values = dict(values)

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key: {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def overridden(self, **dotted) -> "Config":
        """New Config with keys replaced; keys use '__' for '.' when passed
        as kwargs, or pass a dict via overridden(**{"a.b": 1})."""
        fresh = dict(self._values)
        for key, value in dotted.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key!r}")
            fresh[key] = _coerce(key, value)
        cfg = Config(fresh)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self._values
        checks = [
            (1 <= v["data.min_objects"] <= v["data.max_objects"],
             "need 1 <= data.min_objects <= data.max_objects"),
            (v["data.image_size"] % v["model.patch"] == 0,
             "data.image_size must be a multiple of model.patch"),
            (v["loss.epsilon"] > 0, "loss.epsilon must be > 0"),
            (v["depth.alpha"] > 0, "depth.alpha must be > 0"),
            (v["depth.noise_sigma"] >= 0, "depth.noise_sigma must be >= 0"),
            (v["train.stage1_epochs"] >= 0, "train.stage1_epochs must be >= 0"),
            (v["train.stage2_epochs"] >= 0, "train.stage2_epochs must be >= 0"),
            (0 <= v["train.warmup_fraction"] <= 1,
             "train.warmup_fraction must lie in [0, 1]"),
            (0 <= v["train.augment_prob"] <= 1,
             "train.augment_prob must lie in [0, 1]"),
            (v["train.batch_size"] >= 1, "train.batch_size must be >= 1"),
            (v["train.lr"] > 0, "train.lr must be > 0"),
            (v["hyperedge_k"] >= 1, "hyperedge_k must be >= 1"),
            (v["model.rollout_horizon"] >= 0,
             "model.rollout_horizon must be >= 0"),
            (v["model.cross_modal_layers"] >= 1,
             "model.cross_modal_layers must be >= 1"),
            (v["model.mld_blocks"] >= 1, "model.mld_blocks must be >= 1"),
            (v["model.dim"] == v["model.text_dim"],
             "model.dim and model.text_dim must match (residual fusion)"),
            (v["model.dim"] % v["model.encoder_heads"] == 0,
             "model.dim must divide evenly into encoder heads"),
            (v["model.dim"] % v["model.mld_heads"] == 0,
             "model.dim must divide evenly into MLD heads"),
            (v["loss.alpha"] >= 0 and v["loss.beta"] >= 0,
             "loss.alpha and loss.beta must be >= 0"),
            (0 < v["loss.alpha_t"] <= 1, "loss.alpha_t must lie in (0, 1]"),
            (v["loss.gamma"] >= 0, "loss.gamma must be >= 0"),
            (all(v[k] >= 0 for k in ("loss.lambda_tve", "loss.lambda_foc",
                                     "loss.lambda_cls", "loss.lambda_reg")),
             "loss weights must be >= 0"),
            (v["stage2.keep_rollout_weight"] >= 0,
             "stage2.keep_rollout_weight must be >= 0"),
            (0 < v["eval.iou_threshold"] < 1,
             "eval.iou_threshold must lie in (0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def dump_lines(self):
        """One line per key: `key = value  # source`, sorted by key."""
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            tag = DEFAULTS[key].source
            lines.append(f"{key} = {_format_value(value)}  # {tag}")
        return lines

    def as_dict(self) -> dict:
        return dict(self._values)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw):
    """Coerce `raw` (string from a file, or a Python literal) to the
    default's type for `key`."""
    default = DEFAULTS[key].default
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {text!r}")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError:
            kind = "int" if isinstance(default, int) else "float"
            raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
        return text
    # Python-side override
    if isinstance(default, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw
    if isinstance(default, int) and isinstance(raw, bool):
        raise ConfigError(f"{key}: expected int, got {raw!r}")
    if isinstance(default, int):
        if not isinstance(raw, int):
            raise ConfigError(f"{key}: expected int, got {raw!r}")
        return raw
    if isinstance(default, float):
        if not isinstance(raw, (int, float)):
            raise ConfigError(f"{key}: expected float, got {raw!r}")
        return float(raw)
    return raw


def parse_config_text(text: str) -> Config:
    values = {key: entry.default for key, entry in DEFAULTS.items()}
    bad_keys = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, "
                              f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            bad_keys.append(key)
            continue
        values[key] = _coerce(key, raw)
    if bad_keys:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(bad_keys)))
    cfg = Config(values)
    cfg.validate()
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return parse_config_text("")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
