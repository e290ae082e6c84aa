"""Experiment configuration: hyperparameter defaults, presets and the flat ``key = value`` format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ssplab.autodiff import AdamConfig, SgdConfig
from ssplab.controller import ControllerConfig
from ssplab.engine import EngineConfig
from ssplab.search_space import PoisonSetId, SearchSpace, build_space


class ConfigError(ValueError):
    """Unknown key, malformed value or unsupported setting."""


@dataclass(frozen=True)
class ExperimentConfig:
    # search hyperparameters, named as in the reference ENAS implementation
    search_for: str = "macro"
    batch_size: int = 128
    seed: int = 69
    cutout: int = 0
    fixed_arc: bool = False
    child_num_layers: int = 12
    child_out_filters: int = 36
    child_grad_bound: float = 5.0
    child_l2_reg: float = 0.00025
    child_keep_prob: float = 0.9
    child_lr_max: float = 0.05
    child_lr_min: float = 0.0005
    child_lr_T: int = 10
    controller_lstm_size: int = 64
    controller_lstm_num_layers: int = 1
    controller_entropy_weight: float = 0.0001
    controller_train_every: int = 1
    controller_num_aggregate: int = 20
    controller_train_steps: int = 50
    controller_lr: float = 0.001
    controller_tanh_constant: float = 1.5
    controller_op_tanh_reduce: float = 2.5
    controller_skip_target: float = 0.4
    controller_skip_weight: float = 0.8
    controller_bl_dec: float = 0.99
    p: float = 0.9
    # harness keys
    dataset: str = "cifar10"
    poison_set: str = "none"
    instance_factor: int = 1
    epochs: int = 300
    scale_preset: str = "paper"

    def __post_init__(self):
        _validate(self)

    def with_overrides(self, **values) -> "ExperimentConfig":
        return dataclasses.replace(self, **values)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
HYPERPARAMETER_KEYS = tuple(FIELDS)[:26]
HARNESS_KEYS = tuple(FIELDS)[26:]

PRESETS: dict[str, dict[str, object]] = {
    "paper": {},
    # scale keys only; every algorithmic constant keeps its default
    "desk": {"dataset": "synthetic", "child_num_layers": 4, "child_out_filters": 8, "epochs": 30},
}

# Table 1 labels -> (poison set, instance factor)
EXPERIMENTS: dict[str, tuple[str, int]] = {"Original": ("none", 1)}
for _set, _qs, _tag in (
    ("P1", (6, 36, 120, 300), "1"),
    ("P2", (1, 6, 20, 50), "2"),
    ("P3", (6, 36, 120, 300), "3"),
    ("P4", (1, 6, 20, 50), "4"),
):
    for _letter, _q in zip("abcd", _qs):
        EXPERIMENTS[f"{_tag}{_letter}"] = (_set, _q)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.search_for != "macro":
        raise ConfigError(f"search_for={cfg.search_for!r}: only macro search is implemented")
    if cfg.cutout != 0:
        raise ConfigError("cutout augmentation is not implemented; cutout must be 0")
    if cfg.fixed_arc:
        raise ConfigError("fixed_arc=True (retraining a fixed architecture) is not implemented")
    if cfg.controller_lstm_num_layers != 1:
        raise ConfigError("only a single-layer controller LSTM is implemented")
    if cfg.dataset not in ("cifar10", "synthetic"):
        raise ConfigError(f"dataset must be cifar10 or synthetic, got {cfg.dataset!r}")
    if cfg.poison_set != "none" and cfg.poison_set not in {s.value for s in PoisonSetId}:
        raise ConfigError(f"poison_set must be none, P1, P2, P3 or P4, got {cfg.poison_set!r}")
    if cfg.scale_preset not in PRESETS:
        raise ConfigError(f"scale_preset must be one of {', '.join(PRESETS)}")
    positive = ("batch_size", "child_num_layers", "child_out_filters", "child_lr_T", "controller_lstm_size",
                "controller_train_every", "controller_num_aggregate", "controller_train_steps", "instance_factor",
                "epochs")
    for name in positive:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    for name in ("child_keep_prob", "p", "controller_skip_target"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if not 0.0 < cfg.controller_bl_dec < 1.0:
        raise ConfigError("controller_bl_dec must lie in (0, 1)")
    if cfg.child_lr_min > cfg.child_lr_max:
        raise ConfigError("child_lr_min must not exceed child_lr_max")


def _coerce(key: str, raw: str):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELDS[key].type
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines (``#`` starts a comment); rejects unknown and repeated keys."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        values[key] = _coerce(key, raw)
    return values


def build_config(values: dict[str, object]) -> ExperimentConfig:
    """Defaults, then the chosen preset, then explicit ``values``."""
    for key in values:
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    preset = values.get("scale_preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"scale_preset must be one of {', '.join(PRESETS)}")
    merged = {**PRESETS[preset], **values}
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw)
    return build_config(values)


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["# search hyperparameters"]
    lines += [f"{k} = {_format(getattr(cfg, k))}" for k in HYPERPARAMETER_KEYS]
    lines.append("# harness")
    lines += [f"{k} = {_format(getattr(cfg, k))}" for k in HARNESS_KEYS]
    return "\n".join(lines) + "\n"


def experiment_label(cfg: ExperimentConfig) -> str:
    for label, (pset, q) in EXPERIMENTS.items():
        if pset == cfg.poison_set and (pset == "none" or q == cfg.instance_factor):
            return label
    return f"{cfg.poison_set}x{cfg.instance_factor}"


def make_space(cfg: ExperimentConfig) -> SearchSpace:
    return build_space(cfg.poison_set, cfg.instance_factor, cfg.p)


def engine_config(cfg: ExperimentConfig) -> EngineConfig:
    return EngineConfig(
        num_layers=cfg.child_num_layers,
        out_filters=cfg.child_out_filters,
        batch_size=cfg.batch_size,
        keep_prob=cfg.child_keep_prob,
        sgd=SgdConfig(
            lr_max=cfg.child_lr_max,
            lr_min=cfg.child_lr_min,
            period_T=cfg.child_lr_T,
            l2_coeff=cfg.child_l2_reg,
            grad_clip_norm=cfg.child_grad_bound,
        ),
        adam=AdamConfig(lr=cfg.controller_lr),
        controller=ControllerConfig(
            lstm_size=cfg.controller_lstm_size,
            tanh_constant=cfg.controller_tanh_constant,
            op_tanh_reduce=cfg.controller_op_tanh_reduce,
            skip_target=cfg.controller_skip_target,
            skip_weight=cfg.controller_skip_weight,
            entropy_weight=cfg.controller_entropy_weight,
            bl_dec=cfg.controller_bl_dec,
        ),
        controller_train_steps=cfg.controller_train_steps,
        controller_num_aggregate=cfg.controller_num_aggregate,
        controller_train_every=cfg.controller_train_every,
    )
