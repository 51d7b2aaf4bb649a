"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import yaml

from . import dataset as ds_mod
from .augment import AugmentationConfig, SamplingMode, execute_balance, plan_balance
from .backbone import ARCH_NAMES, ModelSpec, build_model, load_checkpoint
from .config import load_run_config, stage_seed
from .dataset import ClassLabel, Split
from .errors import (
    ConfigInvalid,
    DivergedLoss,
    FractionOutOfRange,
    InvalidConfig,
    LeukopipeError,
    UnknownArch,
)
from .metrics import compute_report, load_predictions, save_predictions, save_report
from .pipeline import STAGES, run_pipeline
from .report import emit_comparison, emit_metrics_table, load_literature
from .train import TrainConfig, predict_manifest, save_train_log, train_loop

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _exit_code(exc: LeukopipeError) -> int:
    if isinstance(exc, (ConfigInvalid, InvalidConfig, UnknownArch, FractionOutOfRange)):
        return EXIT_CONFIG
    if isinstance(exc, DivergedLoss):
        return EXIT_DIVERGED
    return EXIT_DATA


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LeukopipeError as exc:
            stage = getattr(exc, "stage", None)
            where = f" [stage {stage}]" if stage else ""
            click.echo(f"error{where}: {exc}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Deterministic transfer-learning pipeline for blood-smear classification."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--src", "sources", multiple=True, required=True,
              type=click.Path(exists=False), help="Source directory (repeatable).")
@click.option("--labels", "rule_file", type=click.Path(), default=None,
              help="JSON file mapping directory-name patterns to HEM/ALL.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Manifest file to write.")
@click.option("--ext", "extensions", multiple=True,
              default=ds_mod.DEFAULT_EXTENSIONS, show_default=True,
              help="Image extensions to accept.")
@handles_errors
def ingest(sources, rule_file, out_path, extensions) -> None:
    """Scan source directories into a manifest."""
    rule = ds_mod.load_label_rule(rule_file) if rule_file else None
    manifest = ds_mod.ingest(sources, rule, extensions)
    ds_mod.save_manifest(manifest, out_path)
    counts = manifest.count_by_label()
    click.echo(f"ingested {len(manifest.records)} records "
               f"({counts[ClassLabel.HEM]} HEM, {counts[ClassLabel.ALL]} ALL) "
               f"-> {out_path}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--test-frac", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Output manifest (defaults to overwriting the input).")
@handles_errors
def split(manifest_path, test_frac, seed, out_path) -> None:
    """Assign a stratified train/test split."""
    manifest = ds_mod.load_manifest(manifest_path)
    manifest = ds_mod.stratified_split(manifest, test_frac, seed)
    ds_mod.save_manifest(manifest, out_path or manifest_path)
    test = manifest.count_by_label(split=Split.TEST)
    click.echo(f"split done: TEST has {test[ClassLabel.HEM]} HEM, "
               f"{test[ClassLabel.ALL]} ALL")


@main.command("carve-val")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--val-frac", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@handles_errors
def carve_val(manifest_path, val_frac, seed, out_path) -> None:
    """Carve a stratified internal validation set out of TRAIN."""
    manifest = ds_mod.load_manifest(manifest_path)
    manifest = ds_mod.carve_internal_val(manifest, val_frac, seed)
    ds_mod.save_manifest(manifest, out_path or manifest_path)
    val = manifest.count_by_label(split=Split.INTERNAL_VAL)
    click.echo(f"carved INTERNAL_VAL: {val[ClassLabel.HEM]} HEM, "
               f"{val[ClassLabel.ALL]} ALL")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--target", type=int, default=10_000, show_default=True,
              help="Per-class training-set size to reach.")
@click.option("--seed", type=int, required=True)
@click.option("--out-dir", required=True, type=click.Path(),
              help="Directory for generated PNGs.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--sampling", type=click.Choice([m.value for m in SamplingMode]),
              default=SamplingMode.ROUND_ROBIN.value, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@handles_errors
def augment(manifest_path, target, seed, out_dir, workers, sampling, out_path) -> None:
    """Balance classes by generating augmented training samples."""
    manifest = ds_mod.load_manifest(manifest_path)
    plan = plan_balance(manifest, target, SamplingMode(sampling))
    click.echo("deficits: " + ", ".join(
        f"{label.name}={plan.deficits[label]}" for label in ClassLabel))
    manifest = execute_balance(manifest, plan, AugmentationConfig(), seed,
                               out_dir, workers=workers)
    ds_mod.save_manifest(manifest, out_path or manifest_path)
    train_counts = manifest.count_by_label(split=Split.TRAIN)
    click.echo(f"train counts now: {train_counts[ClassLabel.HEM]} HEM, "
               f"{train_counts[ClassLabel.ALL]} ALL")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run config supplying train/model/augment settings.")
@click.option("--arch", type=click.Choice(ARCH_NAMES), default=None,
              help="Backbone architecture (overrides config).")
@click.option("--out", "run_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--pretrained/--no-pretrained", default=None)
@handles_errors
def train(manifest_path, config_path, arch, run_dir, seed, epochs,
          batch_size, patience, pretrained) -> None:
    """Fine-tune a backbone on a balanced manifest."""
    if config_path:
        cfg = load_run_config(config_path)
        max_epochs = epochs or cfg.max_epochs
        train_cfg = TrainConfig(
            batch_size=batch_size or cfg.batch_size,
            learning_rate=cfg.learning_rate,
            max_epochs=max_epochs,
            early_stop_patience=patience or min(cfg.early_stop_patience, max_epochs),
            global_seed=stage_seed(seed if seed is not None else cfg.seed, "train"),
        )
        spec = ModelSpec(
            arch=arch or cfg.arch,
            pretrained=cfg.pretrained if pretrained is None else pretrained,
            head_init_seed=stage_seed(seed if seed is not None else cfg.seed, "head"),
        ).resolved()
        aug_cfg = cfg.augmentation
        mean, std, freeze = cfg.mean, cfg.std, cfg.freeze_backbone
    else:
        base_seed = seed if seed is not None else 0
        max_epochs = epochs or 50
        train_cfg = TrainConfig(
            batch_size=batch_size or 32,
            max_epochs=max_epochs,
            early_stop_patience=patience or min(15, max_epochs),
            global_seed=stage_seed(base_seed, "train"),
        )
        spec = ModelSpec(
            arch=arch or "effnet_b3",
            pretrained=True if pretrained is None else pretrained,
            head_init_seed=stage_seed(base_seed, "head"),
        ).resolved()
        aug_cfg = AugmentationConfig()
        from .preprocess import IMAGENET_MEAN, IMAGENET_STD
        mean, std, freeze = IMAGENET_MEAN, IMAGENET_STD, False

    manifest = ds_mod.load_manifest(manifest_path)
    model = build_model(spec, freeze_backbone=freeze)
    run = Path(run_dir)
    checkpoint, train_log = train_loop(
        model, manifest, train_cfg,
        model_spec=spec,
        out_dir=run / "checkpoints" / "best",
        side=aug_cfg.crop_size,
        mean=mean, std=std,
    )
    (run / "logs").mkdir(parents=True, exist_ok=True)
    save_train_log(train_log, run / "logs" / "train_log.json")
    snapshot = {
        "manifest": str(manifest_path),
        "model": {"arch": spec.arch, "pretrained": spec.pretrained,
                  "head_seed": spec.head_init_seed, "freeze_backbone": freeze},
        "train": {"batch_size": train_cfg.batch_size,
                  "learning_rate": train_cfg.learning_rate,
                  "max_epochs": train_cfg.max_epochs,
                  "early_stop_patience": train_cfg.early_stop_patience,
                  "seed": train_cfg.global_seed},
        "preprocess": {"mean": list(mean), "std": list(std)},
    }
    (run / "config.resolved").write_text(
        yaml.safe_dump(snapshot, sort_keys=True), encoding="utf-8")
    click.echo(f"best epoch {train_log.best_epoch} "
               f"(val macro F1 {checkpoint.best_val_macro_f1:.4f}), "
               f"stop: {train_log.stop_reason.value}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(), default=None,
              help="Checkpoint directory (weights.pt + sidecar.json).")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--split", "split_name", type=click.Choice([s.value for s in Split]),
              default=Split.TEST.value, show_default=True)
@click.option("--predictions", "predictions_path", type=click.Path(), default=None,
              help="Skip inference and score an existing prediction file.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the prediction file (inference mode).")
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Where to write the metrics report JSON.")
@click.option("--batch-size", type=int, default=32, show_default=True)
@handles_errors
def eval_cmd(checkpoint_dir, manifest_path, split_name, predictions_path,
             out_path, report_path, batch_size) -> None:
    """Evaluate a checkpoint on a manifest split, or score a prediction file."""
    if predictions_path:
        preds = load_predictions(predictions_path)
    else:
        if not checkpoint_dir or not manifest_path:
            raise ConfigInvalid(
                "eval needs either --predictions or both --checkpoint and --manifest")
        model, _ = load_checkpoint(checkpoint_dir)
        manifest = ds_mod.load_manifest(manifest_path)
        preds = predict_manifest(model, manifest, Split(split_name),
                                 batch_size=batch_size)
        if out_path:
            save_predictions(preds, out_path)
    report = compute_report(preds)
    if report_path:
        save_report(report, report_path)
    click.echo(f"n={report.n} accuracy={report.accuracy:.4f} "
               f"macro_f1={report.macro_f1:.4f} "
               f"auc={'n/a' if report.auc is None else f'{report.auc:.4f}'}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--compare", "literature_path", type=click.Path(), default=None,
              help="Literature TOML (defaults to the bundled table).")
@click.option("--format", "fmt", type=click.Choice(["csv", "md"]),
              default="md", show_default=True)
@handles_errors
def report(run_dir, literature_path, fmt) -> None:
    """Print result tables for a finished run."""
    from .metrics import load_report as _load_report

    run = Path(run_dir)
    metrics_path = run / "reports" / "metrics.json"
    if not metrics_path.exists():
        raise ConfigInvalid(f"no metrics at {metrics_path}; run eval first")
    rep = _load_report(metrics_path)
    sidecar_dir = run / "checkpoints" / "best"
    if (sidecar_dir / "sidecar.json").exists():
        _, checkpoint = load_checkpoint(sidecar_dir)
        spec = checkpoint.spec
    else:
        spec = ModelSpec(arch="effnet_b3", pretrained=False).resolved()
    click.echo(emit_metrics_table([(spec, rep)], fmt=fmt))
    literature = load_literature(literature_path)
    click.echo(emit_comparison(rep.f1_per_class[ClassLabel.ALL], literature, fmt=fmt))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--stages", "stages_csv", default=None,
              help=f"Comma-separated subset of: {', '.join(STAGES)}")
@click.option("--force", is_flag=True, help="Re-run stages even if up to date.")
@handles_errors
def run(config_path, stages_csv, force) -> None:
    """Run the full pipeline (or a stage subset) from a config file."""
    cfg = load_run_config(config_path)
    stages = [s.strip() for s in stages_csv.split(",")] if stages_csv else None
    result = run_pipeline(cfg, stages=stages, force=force)
    for stage in result.ran:
        click.echo(f"ran {stage}: {result.artifacts[stage]}")
    for stage in result.skipped:
        click.echo(f"skipped {stage} (up to date)")


if __name__ == "__main__":
    main()
