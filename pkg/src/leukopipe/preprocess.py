"""Image decoding, RGB conversion, fixed-resolution resize, normalization.

All functions are pure on value arrays. The module-boundary convention is an
HxWx3 numpy array: uint8 before `to_unit_interval`, float32 in [0, 1] after.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from .errors import ShapeMismatch, UndecodableImage, ZeroDimensionImage, ZeroStd

NETWORK_SIDE = 224

# ImageNet statistics of the pretrained backbones; overridable in config.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def decode_image(path: Path | str) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"cannot decode {path}: {exc}") from exc


def convert_rgb(image: Image.Image | np.ndarray) -> np.ndarray:
    """Return an HxWx3 uint8 array.

    Grayscale is replicated across channels; an alpha channel is removed by
    compositing over black, which leaves opaque pixels untouched.
    """
    if isinstance(image, np.ndarray):
        return _convert_rgb_array(image)

    if image.mode == "RGB":
        return np.asarray(image)
    has_alpha = image.mode in ("RGBA", "LA", "PA") or (
        image.mode == "P" and "transparency" in image.info
    )
    if has_alpha:
        rgba = image.convert("RGBA")
        black = Image.new("RGBA", rgba.size, (0, 0, 0, 255))
        return np.asarray(Image.alpha_composite(black, rgba).convert("RGB"))
    return np.asarray(image.convert("RGB"))


def _convert_rgb_array(arr: np.ndarray) -> np.ndarray:
    if arr.dtype != np.uint8:
        raise ShapeMismatch(f"expected uint8 array, got dtype {arr.dtype}")
    if arr.ndim == 2:
        return np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim == 3 and arr.shape[2] == 1:
        return np.repeat(arr, 3, axis=2)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr.copy()
    if arr.ndim == 3 and arr.shape[2] == 4:
        rgb = arr[:, :, :3].astype(np.float32)
        alpha = arr[:, :, 3:4].astype(np.float32) / 255.0
        return np.round(rgb * alpha).astype(np.uint8)
    raise ShapeMismatch(f"unsupported array shape {arr.shape}")


def to_unit_interval(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 HxWx3 in [0, 1]."""
    if image.dtype != np.uint8:
        raise ShapeMismatch(f"expected uint8 input, got {image.dtype}")
    return image.astype(np.float32) / 255.0


def assert_tensor3(image: np.ndarray, side: int | None = None) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 array, got shape {image.shape}")
    if side is not None and image.shape[:2] != (side, side):
        raise ShapeMismatch(
            f"expected {side}x{side}x3 array, got shape {image.shape}")


def resize_fixed(image: np.ndarray, side: int = NETWORK_SIDE) -> np.ndarray:
    """Bilinear resize of a float32 [0,1] HxWx3 array to side x side.

    Aspect ratio is not preserved. A no-op when the image is already at the
    target size, which makes the operation exactly idempotent.
    """
    assert_tensor3(image)
    h, w = image.shape[:2]
    if h == 0 or w == 0 or side <= 0:
        raise ZeroDimensionImage(f"cannot resize shape {image.shape} to side {side}")
    if (h, w) == (side, side):
        return image
    chw = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    out = TF.resize_image(
        chw, [side, side],
        interpolation=InterpolationMode.BILINEAR,
        antialias=True,
    )
    result = out.permute(1, 2, 0).contiguous().numpy()
    return np.clip(result, 0.0, 1.0)


def normalize(
    image: np.ndarray,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> np.ndarray:
    """Channel-wise (x - mean) / std."""
    assert_tensor3(image)
    std_arr = np.asarray(std, dtype=np.float32)
    if np.any(std_arr == 0.0):
        raise ZeroStd(f"std components must be nonzero, got {std}")
    mean_arr = np.asarray(mean, dtype=np.float32)
    return (image - mean_arr) / std_arr


def load_network_input(path: Path | str, side: int = NETWORK_SIDE) -> np.ndarray:
    """decode -> RGB -> [0,1] -> side x side, the canonical model-path load."""
    return resize_fixed(to_unit_interval(convert_rgb(decode_image(path))), side)
