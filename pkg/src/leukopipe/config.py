"""Run configuration: one YAML file drives the whole pipeline.

A single global seed fans out to per-stage seeds through a labeled hash, so
each stage is independently reproducible. Environment variables of the form
``LEUKOPIPE_<SECTION>_<KEY>`` override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugmentationConfig, SamplingMode
from .backbone import ModelSpec
from .dataset import DEFAULT_EXTENSIONS, ClassLabel
from .errors import ConfigInvalid, InvalidConfig, UnknownArch
from .preprocess import IMAGENET_MEAN, IMAGENET_STD
from .seeding import derive_seed

ENV_PREFIX = "LEUKOPIPE_"

_SECTIONS = ("dataset", "augment", "model", "train", "preprocess", "run")


def stage_seed(global_seed: int, stage: str) -> int:
    return derive_seed(global_seed, "stage", stage)


@dataclass(frozen=True)
class RunConfig:
    sources: tuple[str, ...]
    label_rule: dict[str, ClassLabel] | None = None
    extensions: tuple[str, ...] = DEFAULT_EXTENSIONS
    test_fraction: float = 0.1
    val_fraction: float = 0.1
    target_per_class: int = 10_000
    sampling: SamplingMode = SamplingMode.ROUND_ROBIN
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    arch: str = "effnet_b3"
    pretrained: bool = True
    freeze_backbone: bool = False
    head_seed: int | None = None  # derived from the global seed unless set
    batch_size: int = 32
    learning_rate: float = 1e-4
    max_epochs: int = 50
    early_stop_patience: int = 15
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    seed: int = 0
    out_dir: str = "run"
    workers: int = 1

    def effective_head_seed(self) -> int:
        return self.head_seed if self.head_seed is not None \
            else stage_seed(self.seed, "head")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            arch=self.arch,
            pretrained=self.pretrained,
            head_init_seed=self.effective_head_seed(),
        ).resolved()

    def resolved_dict(self) -> dict:
        """Plain fully concrete mapping, suitable for persisting and hashing."""
        return {
            "dataset": {
                "sources": list(self.sources),
                "label_rule": (
                    {k: v.name for k, v in self.label_rule.items()}
                    if self.label_rule else None),
                "extensions": list(self.extensions),
                "test_fraction": self.test_fraction,
                "val_fraction": self.val_fraction,
            },
            "augment": {
                "target_per_class": self.target_per_class,
                "sampling": self.sampling.value,
                **dataclasses.asdict(self.augmentation),
            },
            "model": {
                "arch": self.arch,
                "pretrained": self.pretrained,
                "freeze_backbone": self.freeze_backbone,
                "head_seed": self.effective_head_seed(),
            },
            "train": {
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "max_epochs": self.max_epochs,
                "early_stop_patience": self.early_stop_patience,
                "seed": stage_seed(self.seed, "train"),
            },
            "preprocess": {
                "mean": list(self.mean),
                "std": list(self.std),
            },
            "run": {
                "seed": self.seed,
                "out_dir": self.out_dir,
                "workers": self.workers,
            },
        }

    def digest(self) -> str:
        canonical = json.dumps(self.resolved_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def section_digest(self, section: str) -> str:
        payload = self.resolved_dict()[section]
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _coerce_tuple(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def _check_keys(section: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")


def _apply_env_overrides(sections: dict, env: Mapping[str, str]) -> None:
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in _SECTIONS or not key:
            raise ConfigInvalid(f"unrecognized override variable {name}")
        sections.setdefault(section, {})[key] = yaml.safe_load(raw)


def build_run_config(raw: Mapping[str, Any], env: Mapping[str, str] | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigInvalid("config root must be a mapping")
    sections: dict[str, dict] = {}
    for name, value in raw.items():
        if name not in _SECTIONS:
            raise ConfigInvalid(f"unknown config section [{name}]")
        if not isinstance(value, Mapping):
            raise ConfigInvalid(f"section [{name}] must be a mapping")
        sections[name] = dict(value)
    _apply_env_overrides(sections, env if env is not None else os.environ)

    ds = sections.get("dataset", {})
    _check_keys(ds, {"sources", "label_rule", "extensions",
                     "test_fraction", "val_fraction"}, "dataset")
    sources = ds.get("sources")
    if not sources:
        raise ConfigInvalid("dataset.sources must list at least one directory")

    label_rule = None
    if ds.get("label_rule"):
        try:
            label_rule = {
                str(k).lower(): ClassLabel[str(v).upper()]
                for k, v in ds["label_rule"].items()
            }
        except (KeyError, AttributeError) as exc:
            raise ConfigInvalid(f"bad dataset.label_rule: {exc}") from exc

    aug = sections.get("augment", {})
    aug_fields = {f.name for f in dataclasses.fields(AugmentationConfig)}
    _check_keys(aug, aug_fields | {"target_per_class", "sampling"}, "augment")
    target = int(aug.pop("target_per_class", 10_000))
    try:
        sampling = SamplingMode(aug.pop("sampling", SamplingMode.ROUND_ROBIN))
    except ValueError as exc:
        raise ConfigInvalid(f"bad augment.sampling: {exc}") from exc
    try:
        augmentation = AugmentationConfig(
            **{k: _coerce_tuple(v) for k, v in aug.items()})
        augmentation.validate()
    except (TypeError, InvalidConfig) as exc:
        raise ConfigInvalid(f"bad augment section: {exc}") from exc

    model = sections.get("model", {})
    _check_keys(model, {"arch", "pretrained", "freeze_backbone", "head_seed"}, "model")
    train = sections.get("train", {})
    _check_keys(train, {"batch_size", "learning_rate", "max_epochs",
                        "early_stop_patience"}, "train")
    pre = sections.get("preprocess", {})
    _check_keys(pre, {"mean", "std"}, "preprocess")
    run = sections.get("run", {})
    _check_keys(run, {"seed", "out_dir", "workers"}, "run")

    try:
        cfg = RunConfig(
            sources=tuple(str(s) for s in sources),
            label_rule=label_rule,
            extensions=tuple(ds.get("extensions", DEFAULT_EXTENSIONS)),
            test_fraction=float(ds.get("test_fraction", 0.1)),
            val_fraction=float(ds.get("val_fraction", 0.1)),
            target_per_class=target,
            sampling=sampling,
            augmentation=augmentation,
            arch=str(model.get("arch", "effnet_b3")),
            pretrained=bool(model.get("pretrained", True)),
            freeze_backbone=bool(model.get("freeze_backbone", False)),
            head_seed=(int(model["head_seed"])
                       if model.get("head_seed") is not None else None),
            batch_size=int(train.get("batch_size", 32)),
            learning_rate=float(train.get("learning_rate", 1e-4)),
            max_epochs=int(train.get("max_epochs", 50)),
            early_stop_patience=int(train.get("early_stop_patience", 15)),
            mean=tuple(pre.get("mean", IMAGENET_MEAN)),
            std=tuple(pre.get("std", IMAGENET_STD)),
            seed=int(run.get("seed", 0)),
            out_dir=str(run.get("out_dir", "run")),
            workers=int(run.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad config value: {exc}") from exc

    try:
        cfg.model_spec()  # fails fast on unknown arch
    except UnknownArch as exc:
        raise ConfigInvalid(str(exc)) from exc
    return cfg


def load_run_config(path: Path | str, env: Mapping[str, str] | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc
    return build_run_config(raw or {}, env=env)


def save_resolved_config(cfg: RunConfig, path: Path | str) -> None:
    text = yaml.safe_dump(cfg.resolved_dict(), sort_keys=True)
    Path(path).write_text(text, encoding="utf-8")
