"""Stage orchestration over a run directory.

Each stage writes its artifact plus a completion marker keyed by the resolved
config digest; re-running skips stages whose marker matches, so a finished
run is a no-op to re-invoke. Stages run strictly sequentially.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import augment as aug_mod
from . import dataset as ds_mod
from .backbone import build_model, load_checkpoint
from .config import RunConfig, save_resolved_config, stage_seed
from .dataset import ClassLabel, Split
from .errors import ConfigInvalid, LeukopipeError, StagePrereqMissing
from .metrics import compute_report, load_report, save_predictions, save_report
from .report import emit_comparison, emit_metrics_table, load_literature
from .train import TrainConfig, predict_manifest, save_train_log, train_loop

log = logging.getLogger("leukopipe")

STAGES = ("ingest", "split", "carve_val", "augment", "train", "eval", "report")


@dataclass
class RunResult:
    out_dir: Path
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    artifacts: dict[str, Path] = field(default_factory=dict)


class _Paths:
    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.manifest_dir = out_dir / "manifest"
        self.augmented_dir = out_dir / "augmented"
        self.checkpoint_dir = out_dir / "checkpoints" / "best"
        self.logs_dir = out_dir / "logs"
        self.reports_dir = out_dir / "reports"
        self.resolved_config = out_dir / "config.resolved"
        self.ingested = self.manifest_dir / "ingested.jsonl"
        self.split = self.manifest_dir / "split.jsonl"
        self.carved = self.manifest_dir / "carved.jsonl"
        self.balanced = self.manifest_dir / "balanced.jsonl"
        self.train_log = self.logs_dir / "train_log.json"
        self.predictions = self.reports_dir / "predictions.csv"
        self.metrics = self.reports_dir / "metrics.json"

    def marker(self, stage: str) -> Path:
        return self.logs_dir / f"{stage}.done"


def _require(path: Path, stage: str, hint: str) -> Path:
    if not path.exists():
        raise StagePrereqMissing(
            f"stage {stage!r} needs {path.name} ({hint}); run the earlier stages first")
    return path


def _stage_ingest(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.ingest(cfg.sources, cfg.label_rule, cfg.extensions)
    ds_mod.save_manifest(manifest, paths.ingested)


def _stage_split(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.load_manifest(
        _require(paths.ingested, "split", "ingested manifest"))
    manifest = ds_mod.stratified_split(
        manifest, cfg.test_fraction, stage_seed(cfg.seed, "split"))
    ds_mod.save_manifest(manifest, paths.split)


def _stage_carve_val(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.load_manifest(
        _require(paths.split, "carve_val", "split manifest"))
    manifest = ds_mod.carve_internal_val(
        manifest, cfg.val_fraction, stage_seed(cfg.seed, "carve"))
    ds_mod.save_manifest(manifest, paths.carved)


def _stage_augment(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.load_manifest(
        _require(paths.carved, "augment", "carved manifest"))
    plan = aug_mod.plan_balance(manifest, cfg.target_per_class, cfg.sampling)
    manifest = aug_mod.execute_balance(
        manifest, plan, cfg.augmentation,
        stage_seed(cfg.seed, "augment"),
        paths.augmented_dir,
        workers=cfg.workers,
    )
    ds_mod.save_manifest(manifest, paths.balanced)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        max_epochs=cfg.max_epochs,
        early_stop_patience=cfg.early_stop_patience,
        global_seed=stage_seed(cfg.seed, "train"),
    )


def _stage_train(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.load_manifest(
        _require(paths.balanced, "train", "balanced manifest"))
    spec = cfg.model_spec()
    model = build_model(spec, freeze_backbone=cfg.freeze_backbone)
    _, train_log = train_loop(
        model, manifest, _train_config(cfg),
        aug_config_digest=cfg.section_digest("augment"),
        model_spec=spec,
        out_dir=paths.checkpoint_dir,
        side=cfg.augmentation.crop_size,
        mean=cfg.mean,
        std=cfg.std,
        train_config_digest=cfg.section_digest("train"),
    )
    save_train_log(train_log, paths.train_log)


def _stage_eval(cfg: RunConfig, paths: _Paths) -> None:
    manifest = ds_mod.load_manifest(
        _require(paths.balanced, "eval", "balanced manifest"))
    _require(paths.checkpoint_dir / "weights.pt", "eval", "trained checkpoint")
    model, _ = load_checkpoint(paths.checkpoint_dir)
    preds = predict_manifest(
        model, manifest, Split.TEST,
        batch_size=cfg.batch_size, side=cfg.augmentation.crop_size,
        mean=cfg.mean, std=cfg.std,
    )
    save_predictions(preds, paths.predictions)
    save_report(compute_report(preds), paths.metrics)


def _stage_report(cfg: RunConfig, paths: _Paths) -> None:
    report = load_report(_require(paths.metrics, "report", "evaluation metrics"))
    spec = cfg.model_spec()
    for fmt in ("csv", "md"):
        table = emit_metrics_table([(spec, report)], fmt=fmt)
        (paths.reports_dir / f"metrics_table.{fmt}").write_text(table, encoding="utf-8")
        comparison = emit_comparison(
            report.f1_per_class[ClassLabel.ALL], load_literature(), fmt=fmt)
        (paths.reports_dir / f"comparison.{fmt}").write_text(comparison, encoding="utf-8")


_STAGE_FNS: dict[str, Callable[[RunConfig, _Paths], None]] = {
    "ingest": _stage_ingest,
    "split": _stage_split,
    "carve_val": _stage_carve_val,
    "augment": _stage_augment,
    "train": _stage_train,
    "eval": _stage_eval,
    "report": _stage_report,
}

_ARTIFACTS: dict[str, Callable[[_Paths], Path]] = {
    "ingest": lambda p: p.ingested,
    "split": lambda p: p.split,
    "carve_val": lambda p: p.carved,
    "augment": lambda p: p.balanced,
    "train": lambda p: p.checkpoint_dir,
    "eval": lambda p: p.metrics,
    "report": lambda p: p.reports_dir / "metrics_table.csv",
}


def run_pipeline(
    cfg: RunConfig,
    stages: Sequence[str] | None = None,
    force: bool = False,
) -> RunResult:
    """Execute the requested stages (canonical order) over cfg.out_dir."""
    if stages is None:
        wanted = list(STAGES)
    else:
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ConfigInvalid(
                f"unknown stage(s): {', '.join(sorted(unknown))}; "
                f"valid: {', '.join(STAGES)}")
        wanted = [s for s in STAGES if s in set(stages)]

    paths = _Paths(Path(cfg.out_dir))
    for d in (paths.manifest_dir, paths.augmented_dir, paths.logs_dir,
              paths.reports_dir, paths.checkpoint_dir.parent):
        d.mkdir(parents=True, exist_ok=True)
    save_resolved_config(cfg, paths.resolved_config)
    digest = cfg.digest()

    result = RunResult(out_dir=paths.out)
    for stage in wanted:
        marker = paths.marker(stage)
        if not force and marker.exists():
            try:
                done = json.loads(marker.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                done = {}
            if done.get("config_digest") == digest:
                log.info("stage %s: up to date, skipping", stage)
                result.skipped.append(stage)
                result.artifacts[stage] = _ARTIFACTS[stage](paths)
                continue
        log.info("stage %s: running", stage)
        try:
            _STAGE_FNS[stage](cfg, paths)
        except LeukopipeError as exc:
            exc.stage = stage  # type: ignore[attr-defined]
            log.error("stage %s failed: %s", stage, exc)
            raise
        marker.write_text(json.dumps({
            "stage": stage,
            "config_digest": digest,
            "completed_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }, indent=2) + "\n", encoding="utf-8")
        result.ran.append(stage)
        result.artifacts[stage] = _ARTIFACTS[stage](paths)
    return result
