"""Line-oriented ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a typed default
(see ``DEFAULTS``); unknown keys, malformed lines and bad values raise
:class:`ConfigError` naming the line. Validation happens in :func:`load_config`
and :func:`parse_config` by building every derived config object, so a run
never starts with a broken setting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .attention import WiringMode
from .detr import ModelConfig
from .matching import CostWeights
from .study import CollapseSettings
from .train import TrainConfig


class ConfigError(ValueError):
    pass


#: key -> (default, description). The type of the default is the key's type.
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "base seed for weights, data order and generated data"),
    "out": ("out", "output directory; commands write nowhere else"),
    # model
    "d_model": (64, "token width"),
    "heads": (4, "attention heads"),
    "d_qk": (16, "query/key width per head"),
    "d_v": (16, "value width per head; heads * d_v must equal d_model"),
    "h_mlp": (128, "hidden width of the per-layer MLP"),
    "enc_layers": (2, "encoder layers"),
    "dec_layers": (4, "decoder layers"),
    "num_queries": (16, "prediction slots per scene"),
    "num_classes": (3, "object classes (a no-object class is added)"),
    "grid_size": (8, "embedding grid is grid_size x grid_size cells"),
    "wiring": ("MitiResidual", "PureSAN | SanMlp | StandardSkip | MitiResidual"),
    "miti_scope": ("layer", "decoder skip around the whole layer or each sublayer"),
    "positional": (True, "add the fixed 2-D sine encoding to the tokens"),
    # training
    "epochs": (50, "training epochs"),
    "lr": (1e-3, "base learning rate"),
    "weight_decay": (1e-4, "AdamW decoupled weight decay"),
    "batch_size": (4, "scenes per optimiser step"),
    "clip_max_norm": (0.1, "global gradient-norm clip; 0 disables"),
    "drop_factor": (0.1, "learning-rate multiplier after the drop epoch"),
    "drop_epoch_fraction": (2.0 / 3.0, "drop happens at floor(epochs * fraction)"),
    "cost_class": (1.0, "class weight in matching cost and loss"),
    "cost_l1": (5.0, "L1 box weight"),
    "cost_giou": (2.0, "GIoU weight"),
    "no_object_weight": (0.2, "cross-entropy weight of unmatched slots"),
    "aux_loss": (True, "also match and score the output of every earlier decoder layer"),
    "flip_augment": (False, "train on randomly mirrored copies of each scene"),
    # data
    "train_scenes": (500, "generated training scenes"),
    "eval_scenes": (100, "generated evaluation scenes"),
    "max_objects": (3, "objects per generated scene are uniform in [1, max_objects]"),
    "train_annotations": ("", "optional annotation file replacing generated training scenes"),
    "eval_annotations": ("", "optional annotation file replacing generated evaluation scenes"),
    "checkpoint": ("", "checkpoint read by eval (default: <out>/model.ckpt)"),
    # collapse study
    "probe_d_model": (32, "token width of the random stacks"),
    "probe_heads": (1, "heads of the random stacks"),
    "probe_d_qk": (32, "query/key width of the random stacks"),
    "probe_h_mlp": (64, "MLP width of the random stacks"),
    "probe_depth": (12, "layers per random stack"),
    "probe_tokens": (8, "tokens per random input"),
    "probe_input_residual": (0.8, "composite residual of the random input (< 1)"),
    "probe_margin": (0.999, "4*alpha = margin * sqrt(d_qk) after rescaling"),
    "probe_seeds": (100, "trials per wiring"),
    "probe_wirings": ("PureSAN,SanMlp,StandardSkip,MitiResidual", "comma-separated wirings to study"),
    # gradcheck
    "gradcheck_step": (1e-6, "central-difference step, within [1e-8, 1e-4]"),
    "gradcheck_tol": (1e-5, "largest accepted relative error"),
}


def _convert(key: str, raw: str, where: str):
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{where}: {key} expects {kind}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            d_model=v["d_model"], heads=v["heads"], d_qk=v["d_qk"], d_v=v["d_v"], h_mlp=v["h_mlp"],
            enc_layers=v["enc_layers"], dec_layers=v["dec_layers"], num_queries=v["num_queries"],
            num_classes=v["num_classes"], grid_size=v["grid_size"], wiring=v["wiring"],
            miti_scope=v["miti_scope"], positional=v["positional"],
        )

    @property
    def training(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["epochs"], lr=v["lr"], weight_decay=v["weight_decay"], batch_size=v["batch_size"],
            clip_max_norm=v["clip_max_norm"], drop_factor=v["drop_factor"],
            drop_epoch_fraction=v["drop_epoch_fraction"],
            cost=CostWeights(v["cost_class"], v["cost_l1"], v["cost_giou"], v["no_object_weight"]),
            aux_loss=v["aux_loss"], flip_augment=v["flip_augment"],
        )

    @property
    def collapse(self) -> CollapseSettings:
        v = self.values
        return CollapseSettings(
            d_model=v["probe_d_model"], heads=v["probe_heads"], d_qk=v["probe_d_qk"],
            h_mlp=v["probe_h_mlp"], depth=v["probe_depth"], n_tokens=v["probe_tokens"],
            input_residual=v["probe_input_residual"], margin=v["probe_margin"], seeds=v["probe_seeds"],
        )

    @property
    def wirings(self) -> list[WiringMode]:
        return [WiringMode.parse(w.strip()) for w in self.values["probe_wirings"].split(",") if w.strip()]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def validate(self) -> "RunConfig":
        v = self.values
        try:
            self.model
            self.training
            s = self.collapse
            s.attention
            if not self.wirings:
                raise ValueError("probe_wirings lists no wiring")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if s.depth < 0 or s.seeds < 1 or s.n_tokens < 1:
            raise ConfigError("probe_depth must be >= 0, probe_seeds and probe_tokens >= 1")
        if not 0.0 < s.input_residual < 1.0:
            raise ConfigError("probe_input_residual must lie in (0, 1)")
        if not 0.0 < s.margin <= 1.0:
            raise ConfigError("probe_margin must lie in (0, 1]")
        if v["train_scenes"] < 1 or v["eval_scenes"] < 0 or v["max_objects"] < 1:
            raise ConfigError("train_scenes and max_objects must be >= 1, eval_scenes >= 0")
        if v["max_objects"] > v["num_queries"]:
            raise ConfigError(f"max_objects {v['max_objects']} exceeds num_queries {v['num_queries']}")
        if not 1e-8 <= v["gradcheck_step"] <= 1e-4:
            raise ConfigError(f"gradcheck_step must lie in [1e-8, 1e-4], got {v['gradcheck_step']}")
        if v["gradcheck_tol"] <= 0:
            raise ConfigError("gradcheck_tol must be positive")
        if v["seed"] < 0:
            raise ConfigError("seed must be nonnegative")
        return self


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    values = {k: d for k, (d, _) in DEFAULTS.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{where}: expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _convert(key, raw, where)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _convert(key, str(raw), f"--{key}")
    return RunConfig(values).validate()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides=overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
