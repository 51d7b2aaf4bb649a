"""Pretrained backbone registry with a replaced two-logit head.

Each registered architecture loads its published ImageNet weights (when
requested) and swaps the final classification layer for a freshly
initialized ``Linear(feature_dim, 2)``. All parameters stay trainable by
default; the backbone can optionally be frozen for head-only fine-tuning.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torchvision import models

from .errors import (
    CheckpointDigestMismatch,
    IoFailure,
    ShapeMismatch,
    UnknownArch,
    WeightsUnavailable,
)
from .seeding import derive_seed

NUM_CLASSES = 2
CHECKPOINT_SCHEMA_VERSION = 1


class TinyCnn(nn.Module):
    """Small three-stage convnet used for fast CPU experiments and tests."""

    FEATURE_DIM = 64

    def __init__(self) -> None:
        super().__init__()
        def block(cin: int, cout: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )
        self.features = nn.Sequential(
            block(3, 16), block(16, 32), block(32, self.FEATURE_DIM),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(self.FEATURE_DIM, NUM_CLASSES)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.features(x), 1))


@dataclass(frozen=True)
class _ArchEntry:
    feature_dim: int
    ctor: Callable[..., nn.Module]
    weights: object | None  # torchvision weights enum, None if unavailable


_REGISTRY: dict[str, _ArchEntry] = {
    "resnet50": _ArchEntry(2048, models.resnet50, models.ResNet50_Weights.DEFAULT),
    "resnet101": _ArchEntry(2048, models.resnet101, models.ResNet101_Weights.DEFAULT),
    "effnet_b0": _ArchEntry(1280, models.efficientnet_b0,
                            models.EfficientNet_B0_Weights.DEFAULT),
    "effnet_b1": _ArchEntry(1280, models.efficientnet_b1,
                            models.EfficientNet_B1_Weights.DEFAULT),
    "effnet_b3": _ArchEntry(1536, models.efficientnet_b3,
                            models.EfficientNet_B3_Weights.DEFAULT),
    "tiny_cnn": _ArchEntry(TinyCnn.FEATURE_DIM, TinyCnn, None),
}

ARCH_NAMES = tuple(_REGISTRY)


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "effnet_b3"
    pretrained: bool = True
    num_classes: int = NUM_CLASSES
    head_init_seed: int = 0
    feature_dim: int | None = None

    def resolved(self) -> "ModelSpec":
        """Validate the arch and fill feature_dim from the registry."""
        entry = _REGISTRY.get(self.arch)
        if entry is None:
            raise UnknownArch(
                f"unknown architecture {self.arch!r}; known: {', '.join(ARCH_NAMES)}")
        if self.num_classes != NUM_CLASSES:
            raise UnknownArch(
                f"this pipeline is binary only; num_classes must be {NUM_CLASSES}")
        if self.feature_dim is not None and self.feature_dim != entry.feature_dim:
            raise UnknownArch(
                f"feature_dim {self.feature_dim} does not match {self.arch} "
                f"({entry.feature_dim})")
        return replace(self, feature_dim=entry.feature_dim)


def head_module(model: nn.Module) -> nn.Linear:
    """The replaced classification layer of a built model."""
    if isinstance(model, TinyCnn):
        return model.head
    if isinstance(model, models.ResNet):
        return model.fc
    if isinstance(model, models.EfficientNet):
        return model.classifier[-1]
    raise UnknownArch(f"cannot locate head on {type(model).__name__}")


def pretrained_weights_cached(arch: str) -> bool:
    """True if the published weights are already in the local torch hub cache."""
    entry = _REGISTRY.get(arch)
    if entry is None or entry.weights is None:
        return False
    filename = entry.weights.url.rsplit("/", 1)[-1]
    return (Path(torch.hub.get_dir()) / "checkpoints" / filename).is_file()


def build_model(spec: ModelSpec, freeze_backbone: bool = False) -> nn.Module:
    """Instantiate the backbone, replace the head, and seed its init.

    Backbone construction is wrapped in a forked, seeded RNG so a fresh
    (non-pretrained) model is reproducible; the head is always re-initialized
    from head_init_seed with a uniform +-1/sqrt(fan_in) scheme.
    """
    spec = spec.resolved()
    entry = _REGISTRY[spec.arch]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(spec.head_init_seed, "backbone", spec.arch))
        if spec.pretrained:
            if entry.weights is None:
                raise WeightsUnavailable(
                    f"no published pretrained weights for {spec.arch}")
            try:
                model = entry.ctor(weights=entry.weights)
            except (OSError, RuntimeError, ValueError) as exc:
                raise WeightsUnavailable(
                    f"cannot obtain pretrained weights for {spec.arch}: {exc}"
                ) from exc
        else:
            model = entry.ctor() if entry.weights is None else entry.ctor(weights=None)

    if isinstance(model, models.ResNet):
        model.fc = nn.Linear(entry.feature_dim, spec.num_classes)
    elif isinstance(model, models.EfficientNet):
        model.classifier[-1] = nn.Linear(entry.feature_dim, spec.num_classes)

    head = head_module(model)
    generator = torch.Generator().manual_seed(derive_seed(spec.head_init_seed, "head"))
    bound = 1.0 / math.sqrt(entry.feature_dim)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=generator)
        head.bias.uniform_(-bound, bound, generator=generator)

    if freeze_backbone:
        head_params = set(id(p) for p in head.parameters())
        for p in model.parameters():
            if id(p) not in head_params:
                p.requires_grad_(False)
    return model


def _as_batch_tensor(batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        if batch.ndim != 4 or batch.shape[3] != 3:
            raise ShapeMismatch(f"expected NxHxWx3 batch, got {batch.shape}")
        return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeMismatch(f"expected Nx3xHxW batch, got {tuple(batch.shape)}")
    return batch


def predict_logits(model: nn.Module, batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    x = _as_batch_tensor(batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x.float())
    finally:
        model.train(was_training)
    if logits.ndim != 2 or logits.shape[1] != NUM_CLASSES:
        raise ShapeMismatch(f"model emitted shape {tuple(logits.shape)}")
    return logits


def predict_proba(model: nn.Module, batch: np.ndarray | torch.Tensor) -> np.ndarray:
    """Softmax class probabilities; column 1 is P(positive class)."""
    return torch.softmax(predict_logits(model, batch), dim=1).numpy()


# --- checkpointing -------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    """Paths of the weight blob + sidecar, and the sidecar's key facts."""

    weights_path: str
    sidecar_path: str
    spec: ModelSpec
    epoch: int
    best_val_macro_f1: float
    global_seed: int


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(
    model: nn.Module,
    spec: ModelSpec,
    out_dir: Path | str,
    *,
    epoch: int,
    best_val_macro_f1: float,
    global_seed: int,
    train_config_digest: str = "",
    aug_config_digest: str = "",
) -> Checkpoint:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        weights_path = out / "weights.pt"
        torch.save(model.state_dict(), weights_path)
        sidecar = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "model_spec": asdict(spec.resolved()),
            "epoch": epoch,
            "best_val_macro_f1": best_val_macro_f1,
            "global_seed": global_seed,
            "train_config_digest": train_config_digest,
            "aug_config_digest": aug_config_digest,
            "weights_sha256": _sha256(weights_path),
        }
        sidecar_path = out / "sidecar.json"
        sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {out}: {exc}") from exc
    return Checkpoint(
        weights_path=str(weights_path),
        sidecar_path=str(sidecar_path),
        spec=spec.resolved(),
        epoch=epoch,
        best_val_macro_f1=best_val_macro_f1,
        global_seed=global_seed,
    )


def load_checkpoint(out_dir: Path | str) -> tuple[nn.Module, Checkpoint]:
    """Rebuild the model and load verified weights from a checkpoint pair."""
    out = Path(out_dir)
    weights_path = out / "weights.pt"
    sidecar_path = out / "sidecar.json"
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read sidecar {sidecar_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointDigestMismatch(f"bad sidecar {sidecar_path}: {exc}") from exc

    if sidecar.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointDigestMismatch(
            f"sidecar schema {sidecar.get('schema_version')} != "
            f"{CHECKPOINT_SCHEMA_VERSION}")
    if not weights_path.is_file():
        raise IoFailure(f"missing weight blob {weights_path}")
    actual = _sha256(weights_path)
    if actual != sidecar.get("weights_sha256"):
        raise CheckpointDigestMismatch(
            f"weight blob digest {actual[:12]}... does not match sidecar")

    spec = ModelSpec(**sidecar["model_spec"])
    # fine-tuned weights fully overwrite the init; no download needed
    model = build_model(replace(spec, pretrained=False))
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    checkpoint = Checkpoint(
        weights_path=str(weights_path),
        sidecar_path=str(sidecar_path),
        spec=spec.resolved(),
        epoch=sidecar["epoch"],
        best_val_macro_f1=sidecar["best_val_macro_f1"],
        global_seed=sidecar["global_seed"],
    )
    return model, checkpoint
