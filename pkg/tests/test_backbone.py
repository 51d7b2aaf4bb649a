from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from torch import nn

from leukopipe.backbone import (
    ARCH_NAMES,
    ModelSpec,
    build_model,
    head_module,
    load_checkpoint,
    predict_proba,
    pretrained_weights_cached,
    save_checkpoint,
)
from leukopipe.errors import (
    CheckpointDigestMismatch,
    ShapeMismatch,
    UnknownArch,
    WeightsUnavailable,
)

EXPECTED_FEATURE_DIMS = {
    "resnet50": 2048,
    "resnet101": 2048,
    "effnet_b0": 1280,
    "effnet_b1": 1280,
    "effnet_b3": 1536,
    "tiny_cnn": 64,
}


def _tiny_spec(seed=0):
    return ModelSpec(arch="tiny_cnn", pretrained=False, head_init_seed=seed)


class _FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits[: len(x)]


def test_registry_feature_dims():
    for arch, dim in EXPECTED_FEATURE_DIMS.items():
        assert ModelSpec(arch=arch, pretrained=False).resolved().feature_dim == dim
    assert set(ARCH_NAMES) == set(EXPECTED_FEATURE_DIMS)


def test_unknown_arch():
    with pytest.raises(UnknownArch):
        ModelSpec(arch="vgg16", pretrained=False).resolved()
    with pytest.raises(UnknownArch):
        build_model(ModelSpec(arch="nope", pretrained=False))


def test_feature_dim_mismatch_rejected():
    with pytest.raises(UnknownArch):
        ModelSpec(arch="tiny_cnn", pretrained=False, feature_dim=128).resolved()


def test_num_classes_fixed_at_two():
    with pytest.raises(UnknownArch):
        ModelSpec(arch="tiny_cnn", pretrained=False, num_classes=3).resolved()


def test_tiny_model_output_shape():
    model = build_model(_tiny_spec())
    x = torch.rand(4, 3, 224, 224)
    with torch.no_grad():
        out = model(x)
    assert out.shape == (4, 2)


@pytest.mark.parametrize("arch", [a for a in ARCH_NAMES if a != "tiny_cnn"])
def test_every_arch_emits_two_logits(arch):
    model = build_model(ModelSpec(arch=arch, pretrained=False))
    x = torch.rand(2, 3, 224, 224)
    with torch.no_grad():
        out = model(x)
    assert out.shape == (2, 2)


def test_head_init_deterministic():
    a = head_module(build_model(_tiny_spec(seed=9)))
    b = head_module(build_model(_tiny_spec(seed=9)))
    c = head_module(build_model(_tiny_spec(seed=10)))
    assert torch.equal(a.weight, b.weight)
    assert torch.equal(a.bias, b.bias)
    assert not torch.equal(a.weight, c.weight)


def test_head_init_fan_in_bound():
    head = head_module(build_model(_tiny_spec()))
    bound = 1.0 / math.sqrt(64)
    with torch.no_grad():
        assert float(head.weight.abs().max()) <= bound
        assert float(head.bias.abs().max()) <= bound


def test_full_model_build_deterministic():
    a = build_model(_tiny_spec(seed=4))
    b = build_model(_tiny_spec(seed=4))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        assert torch.equal(va, vb)


def test_freeze_backbone_leaves_head_trainable():
    model = build_model(_tiny_spec(), freeze_backbone=True)
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    assert sorted(trainable) == ["head.bias", "head.weight"]


def test_pretrained_unavailable_raises():
    if pretrained_weights_cached("effnet_b0"):
        pytest.skip("pretrained weights cached locally")
    with pytest.raises(WeightsUnavailable):
        build_model(ModelSpec(arch="effnet_b0", pretrained=True))


def test_tiny_cnn_has_no_pretrained_weights():
    with pytest.raises(WeightsUnavailable):
        build_model(ModelSpec(arch="tiny_cnn", pretrained=True))


@pytest.mark.skipif(not pretrained_weights_cached("effnet_b0"),
                    reason="pretrained weights not cached in this environment")
def test_pretrained_differs_from_random_init():
    pretrained = build_model(ModelSpec(arch="effnet_b0", pretrained=True))
    fresh = build_model(ModelSpec(arch="effnet_b0", pretrained=False))
    x = torch.zeros(1, 3, 224, 224)
    x[0, :, 100:130, 100:130] = 1.0
    with torch.no_grad():
        a = pretrained.features(x)
        b = fresh.features(x)
    assert not torch.allclose(a, b)


# --- predict_proba --------------------------------------------------------------

def test_predict_proba_uniform_logits():
    model = _FixedLogits([[0.0, 0.0], [0.0, 0.0]])
    probs = predict_proba(model, np.zeros((2, 8, 8, 3), dtype=np.float32))
    assert np.allclose(probs, 0.5)


def test_predict_proba_closed_form_offset():
    # logits (z, z+c) -> P(positive) = 1/(1+exp(-c)), independent of z
    cases = [(0.0, 1.0), (5.0, -2.0), (-3.0, 0.5)]
    logits = [[z, z + c] for z, c in cases]
    model = _FixedLogits(logits)
    probs = predict_proba(model, np.zeros((3, 8, 8, 3), dtype=np.float32))
    for row, (_, c) in zip(probs, cases):
        assert row[1] == pytest.approx(1.0 / (1.0 + math.exp(-c)), abs=1e-6)


def test_predict_proba_rows_sum_to_one():
    model = build_model(_tiny_spec())
    batch = np.random.default_rng(0).random((5, 224, 224, 3)).astype(np.float32)
    probs = predict_proba(model, batch)
    assert probs.shape == (5, 2)
    assert np.all(probs >= 0.0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_predict_proba_rejects_bad_shape():
    model = build_model(_tiny_spec())
    with pytest.raises(ShapeMismatch):
        predict_proba(model, np.zeros((5, 224, 224), dtype=np.float32))


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    spec = _tiny_spec(seed=13)
    model = build_model(spec)
    saved = save_checkpoint(model, spec, tmp_path, epoch=3,
                            best_val_macro_f1=0.87, global_seed=42)
    loaded_model, loaded = load_checkpoint(tmp_path)
    assert loaded.epoch == 3
    assert loaded.best_val_macro_f1 == 0.87
    assert loaded.global_seed == 42
    assert loaded.spec == spec.resolved()
    assert saved.spec == loaded.spec
    for (ka, va), (kb, vb) in zip(model.state_dict().items(),
                                  loaded_model.state_dict().items()):
        assert ka == kb
        assert torch.equal(va, vb)


def test_checkpoint_detects_tampering(tmp_path):
    spec = _tiny_spec()
    model = build_model(spec)
    save_checkpoint(model, spec, tmp_path, epoch=1,
                    best_val_macro_f1=0.5, global_seed=1)
    blob = tmp_path / "weights.pt"
    data = bytearray(blob.read_bytes())
    data[len(data) // 2] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointDigestMismatch):
        load_checkpoint(tmp_path)
