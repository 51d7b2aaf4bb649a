from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from datagen import make_blob_tree
from oracles import central_difference_grad
from leukopipe import dataset as ds
from leukopipe.augment import AugmentationConfig, execute_balance, plan_balance
from leukopipe.backbone import ModelSpec, build_model
from leukopipe.dataset import Split
from leukopipe.errors import DivergedLoss, EmptySplit, InvariantViolation, NonFiniteLogits
from leukopipe.train import (
    EarlyStopper,
    EpochRecord,
    StopReason,
    TrainConfig,
    TrainLog,
    cross_entropy,
    load_train_log,
    predict_manifest,
    save_train_log,
    train_loop,
)

# undertrained toy models legitimately hit the zero-division conventions
pytestmark = pytest.mark.filterwarnings("ignore:.*undefined:UserWarning")


# --- cross entropy ---------------------------------------------------------------

def test_loss_uniform_logits_is_ln2():
    logits = torch.zeros(1, 2)
    for label in (0, 1):
        loss = cross_entropy(logits, [label])
        assert float(loss) == pytest.approx(math.log(2), abs=1e-6)


def test_loss_extreme_logits_stable():
    logits = torch.tensor([[1000.0, -1000.0]])
    loss = cross_entropy(logits, [0])
    assert float(loss) == pytest.approx(0.0, abs=1e-6)
    assert math.isfinite(float(loss))
    # and the wrong label costs ~2000 nats without overflowing
    loss_wrong = cross_entropy(logits, [1])
    assert float(loss_wrong) == pytest.approx(2000.0, rel=1e-6)


def test_loss_two_logit_closed_form():
    loss = cross_entropy(torch.tensor([[1.0, 2.0]]), [1])
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)


def test_loss_batch_mean():
    logits = torch.tensor([[0.0, 0.0], [1.0, 2.0]])
    loss = cross_entropy(logits, [0, 1])
    expected = (math.log(2) + math.log(1 + math.exp(-1))) / 2
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLogits):
        cross_entropy(torch.tensor([[float("nan"), 0.0]]), [0])
    with pytest.raises(NonFiniteLogits):
        cross_entropy(torch.tensor([[float("inf"), 0.0]]), [0])


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(1, 9))
        logits = rng.normal(0, 2, (n, 2))
        labels = rng.integers(0, 2, n).tolist()

        t = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
        cross_entropy(t, labels).backward()
        analytic = t.grad.numpy()

        def f(x):
            return float(cross_entropy(torch.tensor(x, dtype=torch.float64), labels))

        numeric = central_difference_grad(f, logits)
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        assert rel <= 1e-4


# --- early stopping --------------------------------------------------------------

def _drive(scores, patience, max_epochs=None):
    stopper = EarlyStopper(patience)
    max_epochs = max_epochs or len(scores)
    for epoch, score in enumerate(scores[:max_epochs], start=1):
        stopper.observe(epoch, score)
        if stopper.should_stop(epoch):
            return epoch, stopper.best_epoch, StopReason.EARLY_STOP
    return max_epochs, stopper.best_epoch, StopReason.MAX_EPOCHS


def test_early_stop_scripted_sequence():
    stop, best, reason = _drive([0.6, 0.7, 0.7, 0.7, 0.7], patience=2)
    assert (stop, best, reason) == (4, 2, StopReason.EARLY_STOP)
    assert stop - best == 2


def test_early_stop_monotone_increase_runs_out():
    scores = [i / 100 for i in range(1, 51)]
    stop, best, reason = _drive(scores, patience=15)
    assert (stop, best, reason) == (50, 50, StopReason.MAX_EPOCHS)


def test_early_stop_immediate_plateau():
    stop, best, reason = _drive([0.5] * 10, patience=3)
    assert (stop, best, reason) == (4, 1, StopReason.EARLY_STOP)


def test_early_stop_improvement_resets_patience():
    stop, best, reason = _drive([0.5, 0.5, 0.6, 0.6, 0.6, 0.6], patience=2)
    assert (stop, best, reason) == (5, 3, StopReason.EARLY_STOP)


def test_early_stop_ignores_float_noise():
    stopper = EarlyStopper(patience=2)
    assert stopper.observe(1, 0.5)
    assert not stopper.observe(2, 0.5 + 1e-9)  # below tolerance
    assert stopper.observe(3, 0.5 + 1e-3)


def test_train_log_invariants():
    epochs = tuple(
        EpochRecord(epoch=i, train_loss=1.0, val_accuracy=0.5,
                    val_macro_f1=f, wall_time_s=0.1)
        for i, f in enumerate([0.6, 0.7, 0.7, 0.7], start=1)
    )
    TrainLog(epochs=epochs, stop_reason=StopReason.EARLY_STOP,
             best_epoch=2, patience=2).validate()
    with pytest.raises(InvariantViolation):
        TrainLog(epochs=epochs, stop_reason=StopReason.EARLY_STOP,
                 best_epoch=2, patience=1).validate()
    with pytest.raises(InvariantViolation):
        TrainLog(epochs=epochs, stop_reason=StopReason.MAX_EPOCHS,
                 best_epoch=1, patience=2).validate()


def test_train_log_roundtrip(tmp_path):
    epochs = tuple(
        EpochRecord(epoch=i, train_loss=0.9 / i, val_accuracy=0.5 + i / 10,
                    val_macro_f1=0.4 + i / 10, wall_time_s=1.5)
        for i in range(1, 4)
    )
    log = TrainLog(epochs=epochs, stop_reason=StopReason.MAX_EPOCHS,
                   best_epoch=3, patience=2)
    save_train_log(log, tmp_path / "log.json")
    assert load_train_log(tmp_path / "log.json") == log


# --- config -----------------------------------------------------------------------

def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(InvariantViolation):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(InvariantViolation):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(InvariantViolation):
        TrainConfig(early_stop_patience=51, max_epochs=50).validate()


# --- train loop -------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_manifest(tmp_path_factory):
    tree = make_blob_tree(tmp_path_factory.mktemp("train_blobs"), 10, size=64, seed=8)
    manifest = ds.ingest([tree])
    manifest = ds.stratified_split(manifest, 0.2, seed=1)
    manifest = ds.carve_internal_val(manifest, 0.25, seed=2)
    plan = plan_balance(manifest, 8)
    return execute_balance(manifest, plan, AugmentationConfig(), 3,
                           tmp_path_factory.mktemp("train_aug"), workers=2)


def _run(mini_manifest, out_dir, seed=5, epochs=2):
    spec = ModelSpec(arch="tiny_cnn", pretrained=False, head_init_seed=seed)
    model = build_model(spec)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=epochs,
                      early_stop_patience=epochs, global_seed=seed)
    return train_loop(model, mini_manifest, cfg, model_spec=spec, out_dir=out_dir)


def test_train_loop_smoke(mini_manifest, tmp_path):
    checkpoint, log = _run(mini_manifest, tmp_path / "ckpt")
    log.validate()
    assert len(log.epochs) == 2
    assert (tmp_path / "ckpt" / "weights.pt").is_file()
    assert (tmp_path / "ckpt" / "sidecar.json").is_file()
    assert checkpoint.epoch == log.best_epoch
    assert checkpoint.best_val_macro_f1 == pytest.approx(
        max(e.val_macro_f1 for e in log.epochs))


def test_train_loop_deterministic(mini_manifest, tmp_path):
    _, log_a = _run(mini_manifest, tmp_path / "a", seed=6)
    _, log_b = _run(mini_manifest, tmp_path / "b", seed=6)
    assert [e.train_loss for e in log_a.epochs] == [e.train_loss for e in log_b.epochs]
    assert [e.val_macro_f1 for e in log_a.epochs] == \
        [e.val_macro_f1 for e in log_b.epochs]


def test_train_loop_seed_changes_losses(mini_manifest, tmp_path):
    _, log_a = _run(mini_manifest, tmp_path / "a", seed=6)
    _, log_b = _run(mini_manifest, tmp_path / "b", seed=7)
    assert [e.train_loss for e in log_a.epochs] != [e.train_loss for e in log_b.epochs]


def test_train_loop_requires_validation_split(blob_tree, tmp_path):
    manifest = ds.ingest([blob_tree])
    manifest = ds.stratified_split(manifest, 0.2, seed=1)  # no carve
    spec = ModelSpec(arch="tiny_cnn", pretrained=False)
    model = build_model(spec)
    with pytest.raises(EmptySplit):
        train_loop(model, manifest, TrainConfig(max_epochs=1, early_stop_patience=1),
                   model_spec=spec, out_dir=tmp_path)


def test_train_loop_diverged_loss(mini_manifest, tmp_path):
    spec = ModelSpec(arch="tiny_cnn", pretrained=False)
    model = build_model(spec)
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    cfg = TrainConfig(batch_size=8, max_epochs=1, early_stop_patience=1)
    with pytest.raises(DivergedLoss):
        train_loop(model, mini_manifest, cfg, model_spec=spec, out_dir=tmp_path)


def test_predict_manifest_sorted_and_complete(mini_manifest):
    spec = ModelSpec(arch="tiny_cnn", pretrained=False)
    model = build_model(spec)
    preds = predict_manifest(model, mini_manifest, Split.TEST, batch_size=4)
    test_ids = sorted(r.id for r in mini_manifest.records if r.split is Split.TEST)
    assert list(preds.ids) == test_ids
    assert all(0.0 <= s <= 1.0 for s in preds.scores)
