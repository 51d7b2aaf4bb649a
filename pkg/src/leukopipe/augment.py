"""Stochastic augmentation chain and iterative class balancing.

The transform chain runs nine stages in a fixed order:

    HFlip -> VFlip -> Rotate -> ColorJitter -> ResizedCrop -> Affine
          -> GaussianBlur -> Sharpness -> Perspective

Every stochastic parameter is drawn from a private RNG seeded per call, so a
given (image, seed, config) triple always reproduces the same pixels, no
matter which worker executes it. Balancing generates exactly the per-class
deficit of augmented samples and persists them as lossless PNG.
"""

from __future__ import annotations

import errno
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from .dataset import ClassLabel, DatasetManifest, ImageRecord, Origin, Split
from .errors import (
    DiskFull,
    InvalidConfig,
    IoFailure,
    NoSplit,
    ParentMissing,
    ShapeMismatch,
)
from .preprocess import assert_tensor3, load_network_input
from .seeding import derive_seed

_BILINEAR = InterpolationMode.BILINEAR
_FILL = [0.0]  # pixels exposed by geometric transforms become black


@dataclass(frozen=True)
class AugmentationConfig:
    """Parameters of the stochastic transform chain (defaults as published)."""

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 25.0
    jitter_brightness: float = 0.3
    jitter_contrast: float = 0.3
    jitter_saturation: float = 0.3
    jitter_hue: float = 0.05
    crop_scale: tuple[float, float] = (0.7, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 1.33)
    crop_size: int = 224
    affine_translate: float = 0.05
    affine_scale: tuple[float, float] = (0.95, 1.05)
    affine_shear_deg: float = 10.0
    blur_kernel: int = 3
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    sharp_factor: float = 2.0
    sharp_p: float = 0.3
    persp_distortion: float = 0.2
    persp_p: float = 0.3

    def validate(self) -> None:
        for name in ("hflip_p", "vflip_p", "sharp_p", "persp_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name} must be in [0, 1], got {p}")
        for name in ("crop_scale", "crop_ratio", "affine_scale", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not (lo <= hi and lo > 0.0):
                raise InvalidConfig(f"{name} must be a positive interval, got {(lo, hi)}")
        for name in ("rotation_deg", "jitter_brightness", "jitter_contrast",
                     "jitter_saturation", "jitter_hue", "affine_translate",
                     "affine_shear_deg", "persp_distortion"):
            v = getattr(self, name)
            if v < 0.0:
                raise InvalidConfig(f"{name} must be >= 0, got {v}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise InvalidConfig(f"blur_kernel must be odd and >= 1, got {self.blur_kernel}")
        if self.crop_size < 1:
            raise InvalidConfig(f"crop_size must be >= 1, got {self.crop_size}")
        if self.jitter_brightness >= 1.0 or self.jitter_contrast >= 1.0 \
                or self.jitter_saturation >= 1.0:
            raise InvalidConfig("jitter deltas for brightness/contrast/saturation "
                                "must be < 1")
        if self.jitter_hue > 0.5:
            raise InvalidConfig(f"jitter_hue must be <= 0.5, got {self.jitter_hue}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        """A fully degenerate config: the chain reproduces its input."""
        return cls(
            hflip_p=0.0, vflip_p=0.0, rotation_deg=0.0,
            jitter_brightness=0.0, jitter_contrast=0.0,
            jitter_saturation=0.0, jitter_hue=0.0,
            crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
            affine_translate=0.0, affine_scale=(1.0, 1.0),
            affine_shear_deg=0.0, blur_kernel=1,
            sharp_p=0.0, persp_p=0.0,
        )


def _separable_blur(x: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    # torchvision's gaussian_blur semantics (reflect pad, separable kernel),
    # computed with shifted-slice adds: grouped conv2d costs ~10ms/call on
    # small kernels here, slices ~0.7ms
    half = (kernel - 1) * 0.5
    grid = torch.linspace(-half, half, kernel, dtype=x.dtype)
    pdf = torch.exp(-0.5 * (grid / sigma) ** 2)
    k1d = pdf / pdf.sum()
    pad = kernel // 2
    h, w = x.shape[1], x.shape[2]

    y = torch.nn.functional.pad(
        x.unsqueeze(0), [0, 0, pad, pad], mode="reflect").squeeze(0)
    out = k1d[0] * y[:, 0:h, :]
    for t in range(1, kernel):
        out += k1d[t] * y[:, t:t + h, :]

    y = torch.nn.functional.pad(
        out.unsqueeze(0), [pad, pad, 0, 0], mode="reflect").squeeze(0)
    out = k1d[0] * y[:, :, 0:w]
    for t in range(1, kernel):
        out += k1d[t] * y[:, :, t:t + w]
    return out


def _adjust_sharpness(x: torch.Tensor, factor: float) -> torch.Tensor:
    # blend against a 3x3 [[1,1,1],[1,5,1],[1,1,1]]/13-smoothed copy whose
    # border rows/cols stay original; the kernel is ones(3,3) + 4*center, so
    # two box passes plus the center term replace the conv
    if x.shape[1] <= 2 or x.shape[2] <= 2:
        return x
    vert = x[:, :-2, :] + x[:, 1:-1, :] + x[:, 2:, :]
    box = vert[:, :, :-2] + vert[:, :, 1:-1] + vert[:, :, 2:]
    smoothed = ((box + 4.0 * x[:, 1:-1, 1:-1]) / 13.0).clamp_(0.0, 1.0)
    degenerate = x.clone()
    degenerate[:, 1:-1, 1:-1] = smoothed
    return (factor * x + (1.0 - factor) * degenerate).clamp_(0.0, 1.0)


def _sample_crop_box(
    rng: random.Random, height: int, width: int,
    scale: tuple[float, float], ratio: tuple[float, float],
) -> tuple[int, int, int, int]:
    """(top, left, h, w) of a random area/aspect box; center-crop fallback."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = rng.randint(0, height - h)
            left = rng.randint(0, width - w)
            return top, left, h, w
    # largest box at the nearest valid aspect ratio, centered
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w = width
        h = height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, h, w


def augment_image(
    image: np.ndarray,
    rng_seed: int,
    cfg: AugmentationConfig,
) -> np.ndarray:
    """Run the stochastic transform chain on one crop_size^2 x 3 float image.

    Output has the same shape, values clamped into [0, 1], and is a pure
    function of (image, rng_seed, cfg). Stages whose drawn parameters are
    exact no-ops are skipped, so a degenerate config reproduces the input.
    """
    cfg.validate()
    assert_tensor3(image, cfg.crop_size)
    if image.dtype != np.float32:
        raise ShapeMismatch(f"expected float32 input, got {image.dtype}")

    rng = random.Random(rng_seed)
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    size = cfg.crop_size

    if rng.random() < cfg.hflip_p:
        x = TF.horizontal_flip_image(x)
    if rng.random() < cfg.vflip_p:
        x = TF.vertical_flip_image(x)

    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    if angle != 0.0:
        x = TF.rotate_image(x, angle, interpolation=_BILINEAR,
                            expand=False, center=None, fill=_FILL)

    # jitter factors in fixed order: brightness, contrast, saturation, hue
    f_bri = rng.uniform(1.0 - cfg.jitter_brightness, 1.0 + cfg.jitter_brightness)
    f_con = rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast)
    f_sat = rng.uniform(1.0 - cfg.jitter_saturation, 1.0 + cfg.jitter_saturation)
    f_hue = rng.uniform(-cfg.jitter_hue, cfg.jitter_hue)
    if f_bri != 1.0:
        x = TF.adjust_brightness_image(x, f_bri)
    if f_con != 1.0:
        x = TF.adjust_contrast_image(x, f_con)
    if f_sat != 1.0:
        x = TF.adjust_saturation_image(x, f_sat)
    if f_hue != 0.0:
        x = TF.adjust_hue_image(x, f_hue)

    top, left, h, w = _sample_crop_box(rng, size, size, cfg.crop_scale, cfg.crop_ratio)
    if (top, left, h, w) != (0, 0, size, size):
        # sampled boxes never exceed the output side, so this only upscales
        # and antialiasing would be a no-op
        x = TF.resized_crop_image(x, top, left, h, w, [size, size],
                                  interpolation=_BILINEAR, antialias=False)

    max_t = cfg.affine_translate * size
    tx = int(round(rng.uniform(-max_t, max_t)))
    ty = int(round(rng.uniform(-max_t, max_t)))
    scale = rng.uniform(cfg.affine_scale[0], cfg.affine_scale[1])
    shear = rng.uniform(-cfg.affine_shear_deg, cfg.affine_shear_deg)
    if (tx, ty, scale, shear) != (0, 0, 1.0, 0.0):
        x = TF.affine_image(x, angle=0.0, translate=[tx, ty], scale=scale,
                            shear=[shear, 0.0], interpolation=_BILINEAR,
                            fill=_FILL, center=None)

    sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1])
    if cfg.blur_kernel > 1:
        x = _separable_blur(x, cfg.blur_kernel, sigma)

    if rng.random() < cfg.sharp_p:
        x = _adjust_sharpness(x, cfg.sharp_factor)

    if rng.random() < cfg.persp_p:
        half_h, half_w = size // 2, size // 2
        dx = int(cfg.persp_distortion * half_w)
        dy = int(cfg.persp_distortion * half_h)
        topleft = [rng.randint(0, dx), rng.randint(0, dy)]
        topright = [rng.randint(size - dx - 1, size - 1), rng.randint(0, dy)]
        botright = [rng.randint(size - dx - 1, size - 1),
                    rng.randint(size - dy - 1, size - 1)]
        botleft = [rng.randint(0, dx), rng.randint(size - dy - 1, size - 1)]
        startpoints = [[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]]
        endpoints = [topleft, topright, botright, botleft]
        if endpoints != startpoints:
            x = TF.perspective_image(x, startpoints, endpoints,
                                     interpolation=_BILINEAR, fill=_FILL)

    # out-of-place: x may still be a view over the caller's array
    x = x.clamp(0.0, 1.0)
    return x.permute(1, 2, 0).contiguous().numpy()


# --- balancing ---------------------------------------------------------------

class SamplingMode(str, Enum):
    ROUND_ROBIN = "ROUND_ROBIN"
    UNIFORM_WITH_REPLACEMENT = "UNIFORM_WITH_REPLACEMENT"


@dataclass(frozen=True)
class BalancePlan:
    """How many augmented samples each class needs to reach the target."""

    target_per_class: int
    deficits: Mapping[ClassLabel, int]
    sampling: SamplingMode = SamplingMode.ROUND_ROBIN


def plan_balance(
    manifest: DatasetManifest,
    target_per_class: int,
    sampling: SamplingMode = SamplingMode.ROUND_ROBIN,
) -> BalancePlan:
    """Deficit per class = max(0, target - original TRAIN count)."""
    if any(r.split is None for r in manifest.records):
        raise NoSplit("manifest must be split before balancing")
    counts = manifest.count_by_label(split=Split.TRAIN, origin=Origin.ORIGINAL)
    deficits = {
        label: max(0, target_per_class - counts[label]) for label in ClassLabel
    }
    return BalancePlan(target_per_class=target_per_class, deficits=deficits,
                       sampling=sampling)


def _write_png(image: np.ndarray, path: Path) -> None:
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(f"no space writing {path}") from exc
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def execute_balance(
    manifest: DatasetManifest,
    plan: BalancePlan,
    cfg: AugmentationConfig,
    global_seed: int,
    out_dir: Path | str,
    workers: int = 1,
) -> DatasetManifest:
    """Generate the planned augmented samples and append them to the manifest.

    Each item's seed derives from (global_seed, class, sequence index), so the
    result is identical for any worker count; images are persisted as PNG
    named ``<parent_id>_aug<k>.png``.
    """
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc

    parents_by_label: dict[ClassLabel, list[ImageRecord]] = {
        label: [] for label in ClassLabel
    }
    for r in manifest.records:
        if r.origin is Origin.ORIGINAL and r.split is Split.TRAIN:
            parents_by_label[r.label].append(r)

    tasks: list[tuple[ImageRecord, int, int]] = []  # (parent, k, aug_seed)
    for label in ClassLabel:
        deficit = plan.deficits.get(label, 0)
        if deficit == 0:
            continue
        parents = sorted(parents_by_label[label], key=lambda r: r.id)
        if not parents:
            raise ParentMissing(
                f"class {label.name} has a deficit of {deficit} but no "
                f"ORIGINAL TRAIN parents")
        order = random.Random(derive_seed(global_seed, "parent-order", label.name))
        order.shuffle(parents)
        for k in range(deficit):
            if plan.sampling is SamplingMode.ROUND_ROBIN:
                parent = parents[k % len(parents)]
            else:
                pick = random.Random(
                    derive_seed(global_seed, "parent-choice", label.name, k))
                parent = parents[pick.randrange(len(parents))]
            tasks.append((parent, k, derive_seed(global_seed, label.name, k)))

    def generate(task: tuple[ImageRecord, int, int]) -> ImageRecord:
        parent, k, aug_seed = task
        try:
            base = load_network_input(parent.path, cfg.crop_size)
        except Exception as exc:
            raise ParentMissing(f"cannot load parent {parent.path}: {exc}") from exc
        child_id = f"{parent.id}_aug{k}"
        _write_png(augment_image(base, aug_seed, cfg), out / f"{child_id}.png")
        return ImageRecord(
            id=child_id,
            path=str((out / f"{child_id}.png").resolve()),
            label=parent.label,
            split=Split.TRAIN,
            origin=Origin.AUGMENTED,
            parent_id=parent.id,
            aug_seed=aug_seed,
        )

    if workers <= 1:
        generated = [generate(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            generated = list(pool.map(generate, tasks))

    result = manifest.with_records(tuple(manifest.records) + tuple(generated))
    result.validate(check_paths=False)
    return result
