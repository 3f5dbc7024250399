"""Flat typed key=value configuration shared by all CLI commands.

Files contain ``key = value`` lines with ``#`` comments; dotted namespaces
mirror the library modules. Every key is validated against the schema below
(unknown keys are rejected with a nearest-key suggestion) and the effective
configuration is echoed into each run's output directory.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .backbone import BackboneConfig
from .data import AugConfig, SynthSpec
from .losses import LossConfig
from .model import ModelConfig, SMRTemplate
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


@dataclass(frozen=True)
class KeySpec:
    kind: str  # int | float | bool | str | int_list | str_list
    default: Any
    help: str
    choices: Optional[tuple] = None
    check: Optional[Callable[[Any], bool]] = None
    constraint: str = ""


def _positive(x) -> bool:
    return x > 0


def _non_negative(x) -> bool:
    return x >= 0


def _probability(x) -> bool:
    return 0.0 <= x <= 1.0


SCHEMA: dict[str, KeySpec] = {
    # data ------------------------------------------------------------------
    "data.manifest": KeySpec("str", "", "path to the dataset manifest CSV"),
    # synthetic dataset -----------------------------------------------------
    "synth.num_identities": KeySpec("int", 20, "identities", check=_positive,
                                    constraint="> 0"),
    "synth.clothes_per_identity": KeySpec("int", 3, "clothings per identity",
                                          check=lambda x: x >= 2,
                                          constraint=">= 2"),
    "synth.images_per_clothing": KeySpec("int", 4, "images per clothing",
                                         check=_positive, constraint="> 0"),
    "synth.image_height": KeySpec("int", 64, "image height", check=_positive,
                                  constraint="> 0"),
    "synth.image_width": KeySpec("int", 32, "image width", check=_positive,
                                 constraint="> 0"),
    "synth.num_cameras": KeySpec("int", 2, "cameras", check=_positive,
                                 constraint="> 0"),
    "synth.seed": KeySpec("int", 7, "generator seed", check=_non_negative,
                          constraint=">= 0"),
    # augmentation ----------------------------------------------------------
    "aug.flip_probability": KeySpec("float", 0.5, "horizontal flip probability",
                                    check=_probability, constraint="in [0, 1]"),
    "aug.pad_pixels": KeySpec("int", 10, "reflection padding before crop",
                              check=_non_negative, constraint=">= 0"),
    "aug.erase_probability": KeySpec("float", 0.5, "random erasing probability",
                                     check=_probability, constraint="in [0, 1]"),
    "aug.erase_area_min": KeySpec("float", 0.02, "min erased area fraction",
                                  check=_positive, constraint="> 0"),
    "aug.erase_area_max": KeySpec("float", 0.4, "max erased area fraction",
                                  check=_positive, constraint="> 0"),
    "aug.erase_aspect_min": KeySpec("float", 0.3, "min erased aspect ratio",
                                    check=_positive, constraint="> 0"),
    "aug.erase_aspect_max": KeySpec("float", 3.33, "max erased aspect ratio",
                                    check=_positive, constraint="> 0"),
    # backbone --------------------------------------------------------------
    "backbone.scale": KeySpec("str", "toy", "trunk scale",
                              choices=("full", "toy")),
    "backbone.input_height": KeySpec("int", 64, "input height", check=_positive,
                                     constraint="> 0"),
    "backbone.input_width": KeySpec("int", 32, "input width", check=_positive,
                                    constraint="> 0"),
    "backbone.channels_out": KeySpec("int", 64, "trunk output channels",
                                     check=_positive, constraint="> 0"),
    "backbone.toy_stage_widths": KeySpec("int_list", (16, 32, 64),
                                         "toy stage widths"),
    "backbone.external_weights": KeySpec("str", "", "optional weight archive"),
    # model -----------------------------------------------------------------
    "model.num_parts": KeySpec("int", 8, "horizontal parts per SMR",
                               check=_positive, constraint="> 0"),
    "model.embed_channels": KeySpec("int", 64, "SMR output channels",
                                    check=_positive, constraint="> 0"),
    "model.part_channels": KeySpec("int", 8, "per-part reduced channels",
                                   check=_positive, constraint="> 0"),
    "model.reduction_ratio": KeySpec("int", 8, "gate bottleneck ratio",
                                     check=_positive, constraint="> 0"),
    "model.neck_enabled": KeySpec("bool", True, "normalization neck before "
                                                "classifiers"),
    "model.disable_branch2": KeySpec("bool", False, "ablation flag"),
    "model.disable_second_smr": KeySpec("bool", False, "ablation flag"),
    "model.disable_local_mining": KeySpec("bool", False, "ablation flag"),
    "model.disable_refinement": KeySpec("bool", False, "ablation flag"),
    "model.swap_branch_order": KeySpec("bool", False, "ablation flag"),
    # loss ------------------------------------------------------------------
    "loss.triplet_margin": KeySpec("float", 0.3, "triplet hinge margin",
                                   check=_non_negative, constraint=">= 0"),
    "loss.label_smoothing": KeySpec("float", 0.1, "classifier label smoothing",
                                    check=lambda x: 0.0 <= x < 1.0,
                                    constraint="in [0, 1)"),
    # training --------------------------------------------------------------
    "train.epochs": KeySpec("int", 120, "training epochs", check=_positive,
                            constraint="> 0"),
    "train.batch_ids": KeySpec("int", 8, "identities per batch",
                               check=_positive, constraint="> 0"),
    "train.instances_per_id": KeySpec("int", 4, "instances per identity",
                                      check=_positive, constraint="> 0"),
    "train.base_lr": KeySpec("float", 3e-4, "post-warmup learning rate",
                             check=_positive, constraint="> 0"),
    "train.warmup_start_lr": KeySpec("float", 3e-5, "warmup start rate",
                                     check=_positive, constraint="> 0"),
    "train.warmup_epochs": KeySpec("int", 10, "warmup epochs",
                                   check=_non_negative, constraint=">= 0"),
    "train.decay_epochs": KeySpec("int_list", (30, 60), "step decay epochs"),
    "train.decay_factor": KeySpec("float", 0.1, "step decay factor",
                                  check=lambda x: 0 < x <= 1,
                                  constraint="in (0, 1]"),
    "train.weight_decay": KeySpec("float", 5e-4, "decoupled weight decay",
                                  check=_non_negative, constraint=">= 0"),
    "train.triplet_start_epoch": KeySpec("int", 31, "first epoch with triplet "
                                                    "terms", check=_positive,
                                         constraint="> 0"),
    "train.seed": KeySpec("int", 0, "training seed", check=_non_negative,
                          constraint=">= 0"),
    # evaluation ------------------------------------------------------------
    "eval.checkpoint": KeySpec("str", "", "checkpoint to evaluate"),
    "eval.settings": KeySpec("str_list", ("standard", "cloth_changing"),
                             "protocol settings to report"),
    "eval.batch_size": KeySpec("int", 32, "extraction batch size",
                               check=_positive, constraint="> 0"),
    "eval.max_rank": KeySpec("int", 50, "CMC curve length", check=_positive,
                             constraint="> 0"),
    "eval.rank_list_k": KeySpec("int", 10, "exported rank-list depth",
                                check=_positive, constraint="> 0"),
    "eval.query_cameras": KeySpec("int_list", (), "camera_split query cameras"),
    "eval.gallery_cameras": KeySpec("int_list", (),
                                    "camera_split gallery cameras"),
    # extraction ------------------------------------------------------------
    "extract.split": KeySpec("str", "gallery", "split to embed",
                             choices=("train", "query", "gallery")),
    # gradient checking -----------------------------------------------------
    "gradcheck.eps": KeySpec("float", 1e-6, "finite-difference step",
                             check=_positive, constraint="> 0"),
    "gradcheck.threshold": KeySpec("float", 1e-5, "max relative error",
                                   check=_positive, constraint="> 0"),
    "gradcheck.seed": KeySpec("int", 0, "gradcheck seed", check=_non_negative,
                              constraint=">= 0"),
    # ablation runner -------------------------------------------------------
    "ablate.presets": KeySpec("str_list",
                              ("full", "wo_smr", "wo_local", "wo_refine",
                               "smr_c_s"),
                              "ablation presets to train and evaluate"),
    "ablate.seeds": KeySpec("int_list", (0, 1, 2), "seeds per preset"),
    "ablate.setting": KeySpec("str", "cloth_changing", "setting for the "
                                                       "comparison table",
                              choices=("standard", "cloth_changing")),
}


def _parse_scalar(key: str, kind: str, raw: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if kind == "str":
            return raw
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip()) \
                if raw else ()
        if kind == "str_list":
            return tuple(v.strip() for v in raw.split(",") if v.strip()) \
                if raw else ()
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': {exc}") from None
    raise ConfigError(f"config key '{key}' has unknown kind '{kind}'")


def _validate(key: str, value: Any) -> Any:
    spec = SCHEMA[key]
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"config key '{key}' must be one of "
                          f"{', '.join(map(str, spec.choices))}; got '{value}'")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"config key '{key}' must be {spec.constraint}; "
                          f"got {value}")
    return value


def _unknown_key_error(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, SCHEMA.keys(), n=1, cutoff=0.4)
    hint = f"; did you mean '{near[0]}'?" if near else ""
    return ConfigError(f"unknown config key '{key}'{hint}")


class Config:
    """Validated flat configuration with attribute-free key access."""

    def __init__(self, values: dict[str, Any]):
        self._values = values

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise _unknown_key_error(key)
        return self._values[key]

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def lines(self) -> list[str]:
        out = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append(f"{key} = {value}")
        return out


def default_config() -> Config:
    return Config({key: spec.default for key, spec in SCHEMA.items()})


def parse_config(path: Optional[str | Path] = None,
                 overrides: tuple[str, ...] = ()) -> Config:
    """Load a config file (optional) and apply ``key=value`` overrides."""
    values = {key: spec.default for key, spec in SCHEMA.items()}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(
                path.read_text(encoding="utf-8").splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in SCHEMA:
                raise _unknown_key_error(key)
            values[key] = _validate(key, _parse_scalar(key, SCHEMA[key].kind,
                                                       raw))
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override '{override}' must look like key=value")
        key, raw = (part.strip() for part in override.split("=", 1))
        if key not in SCHEMA:
            raise _unknown_key_error(key)
        values[key] = _validate(key, _parse_scalar(key, SCHEMA[key].kind, raw))
    return Config(values)


# ---------------------------------------------------------------------------
# Builders from a validated config
# ---------------------------------------------------------------------------

def synth_spec(cfg: Config) -> SynthSpec:
    return SynthSpec(
        num_identities=cfg["synth.num_identities"],
        clothes_per_identity=cfg["synth.clothes_per_identity"],
        images_per_clothing=cfg["synth.images_per_clothing"],
        image_height=cfg["synth.image_height"],
        image_width=cfg["synth.image_width"],
        num_cameras=cfg["synth.num_cameras"],
        seed=cfg["synth.seed"])


def aug_config(cfg: Config) -> AugConfig:
    return AugConfig(
        flip_probability=cfg["aug.flip_probability"],
        pad_pixels=cfg["aug.pad_pixels"],
        erase_probability=cfg["aug.erase_probability"],
        erase_area_range=(cfg["aug.erase_area_min"], cfg["aug.erase_area_max"]),
        erase_aspect_range=(cfg["aug.erase_aspect_min"],
                            cfg["aug.erase_aspect_max"]))


def backbone_config(cfg: Config) -> BackboneConfig:
    try:
        return BackboneConfig(
            scale=cfg["backbone.scale"],
            input_height=cfg["backbone.input_height"],
            input_width=cfg["backbone.input_width"],
            channels_out=cfg["backbone.channels_out"],
            toy_stage_widths=tuple(cfg["backbone.toy_stage_widths"]),
            external_weights_path=cfg["backbone.external_weights"] or None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_config(cfg: Config, num_train_identities: int) -> ModelConfig:
    try:
        return ModelConfig(
            backbone=backbone_config(cfg),
            smr=SMRTemplate(num_parts=cfg["model.num_parts"],
                            embed_channels=cfg["model.embed_channels"],
                            part_channels=cfg["model.part_channels"],
                            reduction_ratio=cfg["model.reduction_ratio"]),
            num_train_identities=num_train_identities,
            neck_enabled=cfg["model.neck_enabled"],
            disable_branch2=cfg["model.disable_branch2"],
            disable_second_smr=cfg["model.disable_second_smr"],
            disable_local_mining=cfg["model.disable_local_mining"],
            disable_refinement=cfg["model.disable_refinement"],
            swap_branch_order=cfg["model.swap_branch_order"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def loss_config(cfg: Config) -> LossConfig:
    return LossConfig(triplet_margin=cfg["loss.triplet_margin"],
                      label_smoothing=cfg["loss.label_smoothing"])


def train_config(cfg: Config, seed: Optional[int] = None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["train.epochs"],
            batch_ids=cfg["train.batch_ids"],
            instances_per_id=cfg["train.instances_per_id"],
            base_lr=cfg["train.base_lr"],
            warmup_start_lr=cfg["train.warmup_start_lr"],
            warmup_epochs=cfg["train.warmup_epochs"],
            decay_epochs=tuple(cfg["train.decay_epochs"]),
            decay_factor=cfg["train.decay_factor"],
            weight_decay=cfg["train.weight_decay"],
            triplet_start_epoch=cfg["train.triplet_start_epoch"],
            seed=cfg["train.seed"] if seed is None else seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
