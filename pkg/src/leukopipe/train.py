"""Mini-batch training with Adam, early stopping on validation macro F1.

The loop shuffles batches with per-epoch derived seeds, evaluates macro F1 on
the internal validation split after every epoch, checkpoints on strict
improvement, and stops after `patience` epochs without one. The checkpoint
returned is the best, not the last.
"""

from __future__ import annotations

import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from json import dumps, loads
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import Checkpoint, ModelSpec, predict_logits, save_checkpoint
from .dataset import DatasetManifest, ImageRecord, Split
from .errors import DivergedLoss, EmptySplit, InvariantViolation, IoFailure, NonFiniteLogits
from .metrics import PredictionSet, compute_report
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, load_network_input, normalize
from .seeding import derive_seed

EARLY_STOP_METRIC = "val_macro_f1"
MIN_IMPROVEMENT = 1e-6  # float noise must not reset patience


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    max_epochs: int = 50
    early_stop_patience: int = 15
    global_seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise InvariantViolation(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvariantViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise InvariantViolation(
                f"early_stop_patience must be in [1, max_epochs], got "
                f"{self.early_stop_patience} with max_epochs={self.max_epochs}")


class StopReason(str, Enum):
    EARLY_STOP = "EARLY_STOP"
    MAX_EPOCHS = "MAX_EPOCHS"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_macro_f1: float
    wall_time_s: float


@dataclass(frozen=True)
class TrainLog:
    epochs: tuple[EpochRecord, ...]
    stop_reason: StopReason
    best_epoch: int
    patience: int

    def validate(self) -> None:
        if not self.epochs:
            raise InvariantViolation("empty training log")
        best_f1 = max(e.val_macro_f1 for e in self.epochs)
        attained = self.epochs[self.best_epoch - 1].val_macro_f1
        if attained < best_f1 - MIN_IMPROVEMENT:
            raise InvariantViolation(
                f"best_epoch {self.best_epoch} does not attain max val F1")
        if self.stop_reason is StopReason.EARLY_STOP:
            last = self.epochs[-1].epoch
            if last - self.best_epoch != self.patience:
                raise InvariantViolation(
                    f"early stop at {last} with best {self.best_epoch} "
                    f"!= patience {self.patience}")


def save_train_log(log: TrainLog, path: Path | str) -> None:
    payload = {
        "stop_reason": log.stop_reason.value,
        "best_epoch": log.best_epoch,
        "patience": log.patience,
        "epochs": [asdict(e) for e in log.epochs],
    }
    try:
        Path(path).write_text(dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write train log {path}: {exc}") from exc


def load_train_log(path: Path | str) -> TrainLog:
    try:
        payload = loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read train log {path}: {exc}") from exc
    return TrainLog(
        epochs=tuple(EpochRecord(**e) for e in payload["epochs"]),
        stop_reason=StopReason(payload["stop_reason"]),
        best_epoch=payload["best_epoch"],
        patience=payload["patience"],
    )


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor | Sequence[int]) -> torch.Tensor:
    """Mean negative log-probability of the true class.

    Uses log-sum-exp directly, so huge logits never overflow.
    """
    if not isinstance(labels, torch.Tensor):
        labels = torch.tensor(labels, dtype=torch.long)
    if logits.ndim != 2:
        raise NonFiniteLogits(f"expected 2-d logits, got shape {tuple(logits.shape)}")
    if not bool(torch.isfinite(logits).all()):
        raise NonFiniteLogits("logits contain NaN or infinity")
    lse = torch.logsumexp(logits, dim=1)
    true_logit = logits.gather(1, labels.view(-1, 1).long()).squeeze(1)
    return (lse - true_logit).mean()


class EarlyStopper:
    """Tracks the best score; stops after `patience` epochs without strict improvement."""

    def __init__(self, patience: int, min_improvement: float = MIN_IMPROVEMENT):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best_score = float("-inf")
        self.best_epoch = 0

    def observe(self, epoch: int, score: float) -> bool:
        if score > self.best_score + self.min_improvement:
            self.best_score = score
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def _load_batch(
    records: Sequence[ImageRecord],
    side: int,
    mean: tuple[float, float, float],
    std: tuple[float, float, float],
) -> tuple[torch.Tensor, torch.Tensor]:
    arrays = [normalize(load_network_input(r.path, side), mean, std) for r in records]
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor([int(r.label) for r in records], dtype=torch.long)
    return x, y


def _prefetched(batches: Iterable, loader) -> Iterator:
    # one batch loads in the background while the current one trains
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = None
        for batch in batches:
            upcoming = pool.submit(loader, batch)
            if pending is not None:
                yield pending.result()
            pending = upcoming
        if pending is not None:
            yield pending.result()


def predict_manifest(
    model: nn.Module,
    manifest: DatasetManifest,
    split: Split,
    batch_size: int = 32,
    side: int = 224,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> PredictionSet:
    """Score every record of a split, in sorted-id order."""
    records = sorted((r for r in manifest.records if r.split is split),
                     key=lambda r: r.id)
    if not records:
        raise EmptySplit(f"no records in split {split.value}")
    ids: list[str] = []
    labels: list[int] = []
    scores: list[float] = []
    chunks = [records[i:i + batch_size] for i in range(0, len(records), batch_size)]
    for x, y in _prefetched(chunks, lambda c: _load_batch(c, side, mean, std)):
        probs = torch.softmax(predict_logits(model, x), dim=1)
        scores.extend(float(p) for p in probs[:, 1])
        labels.extend(int(v) for v in y)
    ids = [r.id for r in records]
    return PredictionSet.from_scores(ids, labels, scores)


def train_loop(
    model: nn.Module,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    aug_config_digest: str = "",
    *,
    model_spec: ModelSpec,
    out_dir: Path | str,
    side: int = 224,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
    train_config_digest: str = "",
) -> tuple[Checkpoint, TrainLog]:
    """Fine-tune `model` on the manifest's TRAIN split.

    Returns the best checkpoint (highest validation macro F1) and the log.
    """
    cfg.validate()
    train_records = sorted(
        (r for r in manifest.records if r.split is Split.TRAIN), key=lambda r: r.id)
    val_records = [r for r in manifest.records if r.split is Split.INTERNAL_VAL]
    if not train_records:
        raise EmptySplit("no TRAIN records to fit on")
    if not val_records:
        raise EmptySplit("no INTERNAL_VAL records for early stopping")

    torch.manual_seed(derive_seed(cfg.global_seed, "train"))
    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad), lr=cfg.learning_rate)
    stopper = EarlyStopper(cfg.early_stop_patience)
    out = Path(out_dir)

    epochs: list[EpochRecord] = []
    stop_reason = StopReason.MAX_EPOCHS
    best_state: dict | None = None
    checkpoint: Checkpoint | None = None

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = list(range(len(train_records)))
        random.Random(derive_seed(cfg.global_seed, "epoch", epoch)).shuffle(order)
        chunks = [
            [train_records[j] for j in order[i:i + cfg.batch_size]]
            for i in range(0, len(order), cfg.batch_size)
        ]

        model.train()
        loss_sum = 0.0
        seen = 0
        for x, y in _prefetched(chunks, lambda c: _load_batch(c, side, mean, std)):
            optimizer.zero_grad()
            logits = model(x)
            try:
                loss = cross_entropy(logits, y)
            except NonFiniteLogits as exc:
                raise DivergedLoss(f"non-finite logits at epoch {epoch}") from exc
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.item()) * len(y)
            seen += len(y)
        mean_loss = loss_sum / seen
        if not np.isfinite(mean_loss):
            raise DivergedLoss(f"training loss diverged at epoch {epoch}")

        val_preds = predict_manifest(model, manifest, Split.INTERNAL_VAL,
                                     batch_size=cfg.batch_size, side=side,
                                     mean=mean, std=std)
        val_report = compute_report(val_preds)
        epochs.append(EpochRecord(
            epoch=epoch,
            train_loss=mean_loss,
            val_accuracy=val_report.accuracy,
            val_macro_f1=val_report.macro_f1,
            wall_time_s=time.perf_counter() - started,
        ))

        if stopper.observe(epoch, val_report.macro_f1):
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            checkpoint = save_checkpoint(
                model, model_spec, out,
                epoch=epoch,
                best_val_macro_f1=val_report.macro_f1,
                global_seed=cfg.global_seed,
                train_config_digest=train_config_digest,
                aug_config_digest=aug_config_digest,
            )
        if stopper.should_stop(epoch):
            stop_reason = StopReason.EARLY_STOP
            break

    assert best_state is not None and checkpoint is not None
    model.load_state_dict(best_state)
    log = TrainLog(
        epochs=tuple(epochs),
        stop_reason=stop_reason,
        best_epoch=stopper.best_epoch,
        patience=cfg.early_stop_patience,
    )
    log.validate()
    return checkpoint, log
