from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from leukopipe import preprocess as pp
from leukopipe.errors import ShapeMismatch, UndecodableImage, ZeroDimensionImage, ZeroStd


def test_convert_rgb_grayscale_replicates():
    gray = np.arange(64, dtype=np.uint8).reshape(8, 8)
    out = pp.convert_rgb(gray)
    assert out.shape == (8, 8, 3)
    assert np.array_equal(out[:, :, 0], gray)
    assert np.array_equal(out[:, :, 0], out[:, :, 1])
    assert np.array_equal(out[:, :, 1], out[:, :, 2])


def test_convert_rgb_grayscale_pil():
    img = Image.new("L", (6, 4), 77)
    out = pp.convert_rgb(img)
    assert out.shape == (4, 6, 3)
    assert np.all(out == 77)


def test_convert_rgb_opaque_alpha_dropped():
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    rgba = np.dstack([rgb, np.full((5, 5), 255, dtype=np.uint8)])
    assert np.array_equal(pp.convert_rgb(rgba), rgb)

    pil = Image.fromarray(rgba, mode="RGBA")
    assert np.array_equal(pp.convert_rgb(pil), rgb)


def test_convert_rgb_transparent_composites_to_black():
    rgba = np.dstack([
        np.full((3, 3, 3), 200, dtype=np.uint8),
        np.zeros((3, 3), dtype=np.uint8),
    ])
    assert np.all(pp.convert_rgb(rgba) == 0)


def test_convert_rgb_identity():
    rgb = np.random.default_rng(1).integers(0, 256, (7, 9, 3), dtype=np.uint8)
    assert np.array_equal(pp.convert_rgb(rgb), rgb)


def test_decode_image_failure(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    with pytest.raises(UndecodableImage):
        pp.decode_image(bad)


def test_resize_450_to_224():
    img = np.random.default_rng(2).random((450, 450, 3)).astype(np.float32)
    out = pp.resize_fixed(img)
    assert out.shape == (224, 224, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_resize_identity_at_target():
    img = np.random.default_rng(3).random((224, 224, 3)).astype(np.float32)
    assert np.array_equal(pp.resize_fixed(img), img)


def test_resize_single_pixel_constant_field():
    img = np.full((1, 1, 3), 0.35, dtype=np.float32)
    out = pp.resize_fixed(img)
    assert out.shape == (224, 224, 3)
    assert np.allclose(out, 0.35, atol=1e-6)


def test_resize_idempotent():
    img = np.random.default_rng(4).random((300, 200, 3)).astype(np.float32)
    once = pp.resize_fixed(img)
    twice = pp.resize_fixed(once)
    assert np.max(np.abs(twice - once)) <= 1e-6


def test_resize_zero_dimension():
    with pytest.raises(ZeroDimensionImage):
        pp.resize_fixed(np.zeros((0, 5, 3), dtype=np.float32))


def test_resize_rejects_bad_shape():
    with pytest.raises(ShapeMismatch):
        pp.resize_fixed(np.zeros((5, 5), dtype=np.float32))


def test_to_unit_interval_range():
    raw = np.random.default_rng(5).integers(0, 256, (20, 20, 3), dtype=np.uint8)
    unit = pp.to_unit_interval(raw)
    assert unit.dtype == np.float32
    assert unit.min() >= 0.0 and unit.max() <= 1.0
    assert np.allclose(unit * 255.0, raw)


def test_normalize_identity():
    img = np.random.default_rng(6).random((4, 4, 3)).astype(np.float32)
    out = pp.normalize(img, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert np.allclose(out, img)


def test_normalize_constant_to_zero():
    img = np.full((4, 4, 3), 0.5, dtype=np.float32)
    assert np.allclose(pp.normalize(img, (0.5, 0.5, 0.5), (1.0, 1.0, 1.0)), 0.0)


def test_normalize_single_value():
    img = np.full((1, 1, 3), 0.8, dtype=np.float32)
    out = pp.normalize(img, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    assert np.allclose(out, 1.2)


def test_normalize_zero_std():
    img = np.zeros((2, 2, 3), dtype=np.float32)
    with pytest.raises(ZeroStd):
        pp.normalize(img, (0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


def test_load_network_input_shape(tmp_path):
    rgb = np.random.default_rng(7).integers(0, 256, (45, 33, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    Image.fromarray(rgb).save(path)
    out = pp.load_network_input(path)
    assert out.shape == (224, 224, 3)
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
