"""Dataset ingestion, stratified splitting, and manifest persistence.

A manifest is an immutable list of image records plus bookkeeping (sources,
split seed). All operations return new manifests; nothing mutates in place,
so manifests are safe to share across workers.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import random
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image, UnidentifiedImageError

from .errors import (
    AlreadyAugmented,
    AlreadyCarved,
    AlreadySplit,
    DuplicatePath,
    EmptyClass,
    FractionOutOfRange,
    InvariantViolation,
    IoFailure,
    MissingDirectory,
    NoSplit,
    SchemaVersionMismatch,
    UnreadableImage,
)
from .seeding import derive_seed

MANIFEST_SCHEMA_VERSION = 1

DEFAULT_EXTENSIONS = (".bmp", ".png", ".jpg", ".jpeg")

# Directory-name substrings mapped to labels; override with a rule file.
DEFAULT_LABEL_RULE: dict[str, "ClassLabel"] = {}  # filled below


class ClassLabel(IntEnum):
    """Binary target: 0 = healthy hematologic cell, 1 = leukemic (ALL) cell."""

    HEM = 0
    ALL = 1


DEFAULT_LABEL_RULE.update({"hem": ClassLabel.HEM, "all": ClassLabel.ALL})


class Split(str, Enum):
    TRAIN = "TRAIN"
    INTERNAL_VAL = "INTERNAL_VAL"
    TEST = "TEST"


class Origin(str, Enum):
    ORIGINAL = "ORIGINAL"
    AUGMENTED = "AUGMENTED"


@dataclass(frozen=True)
class ImageRecord:
    """One image: where it lives, what it is, and where it came from."""

    id: str
    path: str
    label: ClassLabel
    split: Split | None = None
    origin: Origin = Origin.ORIGINAL
    parent_id: str | None = None
    aug_seed: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    sources: tuple[str, ...]
    split_seed: int | None = None
    created_at: str = ""

    def count_by_label(
        self,
        split: Split | None = None,
        origin: Origin | None = None,
    ) -> Counter:
        """Per-class record counts, optionally filtered by split/origin."""
        c: Counter = Counter({label: 0 for label in ClassLabel})
        for r in self.records:
            if split is not None and r.split is not split:
                continue
            if origin is not None and r.origin is not origin:
                continue
            c[r.label] += 1
        return c

    def with_records(self, records: Iterable[ImageRecord], **changes) -> "DatasetManifest":
        return replace(self, records=tuple(records), **changes)

    def validate(self, check_paths: bool = True) -> None:
        """Raise InvariantViolation if any record-level invariant is broken."""
        by_id: dict[str, ImageRecord] = {}
        for r in self.records:
            if r.id in by_id:
                raise InvariantViolation(f"duplicate record id {r.id!r}")
            by_id[r.id] = r

        for r in self.records:
            if r.origin is Origin.AUGMENTED:
                if r.parent_id is None or r.aug_seed is None:
                    raise InvariantViolation(
                        f"augmented record {r.id!r} lacks parent_id/aug_seed")
                parent = by_id.get(r.parent_id)
                if parent is None:
                    raise InvariantViolation(
                        f"augmented record {r.id!r} references unknown parent "
                        f"{r.parent_id!r}")
                if parent.origin is not Origin.ORIGINAL:
                    raise InvariantViolation(
                        f"augmented record {r.id!r} has non-original parent")
                if parent.label is not r.label:
                    raise InvariantViolation(
                        f"augmented record {r.id!r} label differs from parent")
                if r.split is not Split.TRAIN:
                    raise InvariantViolation(
                        f"augmented record {r.id!r} must be TRAIN, got {r.split}")
            else:
                if r.parent_id is not None or r.aug_seed is not None:
                    raise InvariantViolation(
                        f"original record {r.id!r} carries augmentation fields")

        if check_paths:
            missing = [r.path for r in self.records if not Path(r.path).is_file()]
            if missing:
                raise InvariantViolation(
                    f"{len(missing)} record path(s) do not exist, e.g. {missing[0]!r}")

        self._check_stratification()

    def _check_stratification(self) -> None:
        # Test-set class proportions must track the originals within 1 sample.
        originals = self.count_by_label(origin=Origin.ORIGINAL)
        test = self.count_by_label(split=Split.TEST)
        n_orig = sum(originals.values())
        n_test = sum(test.values())
        if n_test == 0 or n_orig == 0:
            return
        for label in ClassLabel:
            expected = n_test * originals[label] / n_orig
            if abs(test[label] - expected) > 1.0 + 1e-9:
                raise InvariantViolation(
                    f"test split not stratified for {label.name}: "
                    f"{test[label]} vs expected {expected:.2f}")


def record_id_for_path(path: Path | str) -> str:
    digest = hashlib.blake2b(str(path).encode(), digest_size=8)
    return digest.hexdigest()


def _match_label(name: str, rule: Mapping[str, ClassLabel]) -> ClassLabel | None:
    lowered = name.lower()
    if lowered in rule:
        return rule[lowered]
    # longest pattern first so e.g. "all_cells" beats a shorter overlap
    for pattern in sorted(rule, key=len, reverse=True):
        if pattern in lowered:
            return rule[pattern]
    return None


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError, ValueError):
        return False


def ingest(
    source_dirs: Sequence[Path | str],
    label_rule: Mapping[str, ClassLabel] | None = None,
    extensions: Sequence[str] = DEFAULT_EXTENSIONS,
) -> DatasetManifest:
    """Scan labeled subdirectories of each source and merge them into one manifest.

    Each source directory must contain at least one subdirectory per class
    whose name matches ``label_rule`` (case-insensitive substring match,
    defaults to hem/all) with at least one decodable image in it. Records get
    origin=ORIGINAL and no split assignment.
    """
    rule = {k.lower(): v for k, v in (label_rule or DEFAULT_LABEL_RULE).items()}
    exts = tuple(e.lower() for e in extensions)

    seen_paths: set[str] = set()
    records: list[ImageRecord] = []
    unreadable: list[str] = []
    found_per_source: list[tuple[Path, Counter]] = []

    for source in source_dirs:
        src = Path(source)
        if not src.is_dir():
            raise MissingDirectory(f"source directory does not exist: {src}")
        found: Counter = Counter({label: 0 for label in ClassLabel})
        for sub in sorted(p for p in src.iterdir() if p.is_dir()):
            label = _match_label(sub.name, rule)
            if label is None:
                continue
            files = sorted(
                p for p in sub.rglob("*")
                if p.is_file() and p.suffix.lower() in exts
            )
            if not files:
                raise EmptyClass(
                    f"labeled directory {sub} contributes zero images")
            for f in files:
                resolved = str(f.resolve())
                if resolved in seen_paths:
                    raise DuplicatePath(
                        f"path appears in more than one source: {resolved}")
                seen_paths.add(resolved)
                if not _decodable(f):
                    unreadable.append(resolved)
                    continue
                records.append(ImageRecord(
                    id=record_id_for_path(resolved),
                    path=resolved,
                    label=label,
                ))
                found[label] += 1
        found_per_source.append((src, found))

    if unreadable:
        raise UnreadableImage(unreadable)
    for src, found in found_per_source:
        for label in ClassLabel:
            if found[label] == 0:
                raise EmptyClass(
                    f"source {src} contributes no {label.name} images")

    manifest = DatasetManifest(
        records=tuple(records),
        sources=tuple(str(Path(s)) for s in source_dirs),
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
    )
    manifest.validate(check_paths=False)
    return manifest


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _stratified_pick(
    ids_by_label: Mapping[ClassLabel, list[str]],
    fraction: float,
    seed: int,
    purpose: str,
) -> set[str]:
    """Seed-deterministic per-class selection of round(fraction * n) ids.

    Selection is a pure function of (seed, sorted ids): ids are sorted,
    shuffled with a per-class derived RNG, and the head is taken.
    """
    picked: set[str] = set()
    for label, ids in ids_by_label.items():
        ordered = sorted(ids)
        rng = random.Random(derive_seed(seed, purpose, label.name))
        rng.shuffle(ordered)
        n_pick = _round_half_up(len(ordered) * fraction)
        picked.update(ordered[:n_pick])
    return picked


def stratified_split(
    manifest: DatasetManifest,
    test_fraction: float,
    seed: int,
) -> DatasetManifest:
    """Assign TRAIN/TEST per class, reserving round(n_c * fraction) for TEST."""
    if not 0.0 < test_fraction < 1.0:
        raise FractionOutOfRange(
            f"test_fraction must be in (0, 1), got {test_fraction}")
    if any(r.split is not None for r in manifest.records):
        raise AlreadySplit("manifest already carries split assignments")
    if any(r.origin is not Origin.ORIGINAL for r in manifest.records):
        raise AlreadyAugmented("split must run before augmentation")

    ids_by_label: dict[ClassLabel, list[str]] = {label: [] for label in ClassLabel}
    for r in manifest.records:
        ids_by_label[r.label].append(r.id)
    test_ids = _stratified_pick(ids_by_label, test_fraction, seed, "split")

    records = tuple(
        replace(r, split=Split.TEST if r.id in test_ids else Split.TRAIN)
        for r in manifest.records
    )
    out = manifest.with_records(records, split_seed=seed)
    out.validate(check_paths=False)
    return out


def carve_internal_val(
    manifest: DatasetManifest,
    val_fraction: float,
    seed: int,
) -> DatasetManifest:
    """Reassign a stratified share of TRAIN originals to INTERNAL_VAL.

    Must run after the train/test split and before augmentation, so no
    augmented near-copy of a validation image can leak into training.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise FractionOutOfRange(
            f"val_fraction must be in [0, 1), got {val_fraction}")
    if any(r.origin is Origin.AUGMENTED for r in manifest.records):
        raise AlreadyAugmented("carve must run before augmentation")
    if any(r.split is Split.INTERNAL_VAL for r in manifest.records):
        raise AlreadyCarved("manifest already has an INTERNAL_VAL carve")
    if any(r.split is None for r in manifest.records):
        raise NoSplit("run the train/test split before carving validation data")
    if val_fraction == 0.0:
        warnings.warn("val_fraction=0: no validation data carved", stacklevel=2)
        return manifest

    ids_by_label: dict[ClassLabel, list[str]] = {label: [] for label in ClassLabel}
    for r in manifest.records:
        if r.split is Split.TRAIN:
            ids_by_label[r.label].append(r.id)
    val_ids = _stratified_pick(ids_by_label, val_fraction, seed, "carve")

    records = tuple(
        replace(r, split=Split.INTERNAL_VAL) if r.id in val_ids else r
        for r in manifest.records
    )
    out = manifest.with_records(records)
    out.validate(check_paths=False)
    return out


# --- persistence -------------------------------------------------------------

def _record_to_dict(r: ImageRecord) -> dict:
    return {
        "id": r.id,
        "path": r.path,
        "label": r.label.name,
        "split": r.split.value if r.split is not None else None,
        "origin": r.origin.value,
        "parent_id": r.parent_id,
        "aug_seed": r.aug_seed,
    }


def _record_from_dict(d: dict) -> ImageRecord:
    return ImageRecord(
        id=d["id"],
        path=d["path"],
        label=ClassLabel[d["label"]],
        split=Split(d["split"]) if d.get("split") else None,
        origin=Origin(d["origin"]),
        parent_id=d.get("parent_id"),
        aug_seed=d.get("aug_seed"),
    )


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write one header line plus one JSON line per record (UTF-8)."""
    header = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "leukopipe.manifest",
        "sources": list(manifest.sources),
        "split_seed": manifest.split_seed,
        "created_at": manifest.created_at,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.extend(
        json.dumps(_record_to_dict(r), sort_keys=True, separators=(",", ":"))
        for r in manifest.records
    )
    try:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest file and check record-level invariants (not paths)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaVersionMismatch(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaVersionMismatch(f"manifest {path}: bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("kind") != "leukopipe.manifest":
        raise SchemaVersionMismatch(f"manifest {path}: not a manifest file")
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"manifest {path}: schema_version {header.get('schema_version')} "
            f"!= {MANIFEST_SCHEMA_VERSION}")

    try:
        records = tuple(_record_from_dict(json.loads(ln)) for ln in lines[1:])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise SchemaVersionMismatch(f"manifest {path}: bad record line: {exc}") from exc

    manifest = DatasetManifest(
        records=records,
        sources=tuple(header.get("sources", ())),
        split_seed=header.get("split_seed"),
        created_at=header.get("created_at", ""),
    )
    manifest.validate(check_paths=False)
    return manifest


def load_label_rule(path: Path | str) -> dict[str, ClassLabel]:
    """Read a JSON rule file mapping directory-name patterns to HEM/ALL."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return {str(k).lower(): ClassLabel[str(v).upper()] for k, v in raw.items()}
    except OSError as exc:
        raise IoFailure(f"cannot read label rule {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError, AttributeError, ValueError) as exc:
        raise SchemaVersionMismatch(f"bad label rule file {path}: {exc}") from exc
