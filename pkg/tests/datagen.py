"""Synthetic test data: colored-blob image trees and in-memory manifests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from leukopipe.dataset import ClassLabel, DatasetManifest, ImageRecord, Origin, Split

BLOB_COLORS = {"hem": (40, 60, 200), "all": (210, 50, 40)}


def make_blob_tree(root: Path, n_per_class: int, size: int = 96, seed: int = 0) -> Path:
    """Two labeled subdirectories of noisy images with a class-colored blob."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for cls, base in BLOB_COLORS.items():
        sub = root / cls
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = rng.normal(30, 15, (size, size, 3))
            cy, cx = rng.uniform(0.3, 0.7, 2) * size
            radius = rng.uniform(0.15, 0.3) * size
            yy, xx = np.mgrid[0:size, 0:size]
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)))
            img += blob[..., None] * (np.array(base) * rng.uniform(0.8, 1.2))
            pixels = np.clip(img, 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(sub / f"{cls}_{i:04d}.png")
    return root


def synth_manifest(
    counts: dict[ClassLabel, int],
    split: Split | None = None,
    paths: dict[ClassLabel, list[str]] | None = None,
) -> DatasetManifest:
    """Manifest of fabricated records; paths are fake unless supplied."""
    records = []
    for label, n in counts.items():
        for i in range(n):
            if paths is not None:
                path = paths[label][i % len(paths[label])]
            else:
                path = f"/nowhere/{label.name.lower()}_{i:05d}.png"
            records.append(ImageRecord(
                id=f"{label.name.lower()}-{i:05d}",
                path=path,
                label=label,
                split=split,
                origin=Origin.ORIGINAL,
            ))
    return DatasetManifest(records=tuple(records), sources=("synthetic",),
                           created_at="1970-01-01T00:00:00+00:00")
