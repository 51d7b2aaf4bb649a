"""Result tables: per-model metrics and comparison against published scores.

Tables are emitted both machine-readable (CSV) and human-readable (markdown).
Percentages are rounded half-even to two decimals. The headline
Precision/Recall/F1 columns are the positive-class values (the convention the
benchmark's published tables follow); macro-averaged values are carried in
extra columns so both readings stay available.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from importlib import resources
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .backbone import ModelSpec
from .dataset import ClassLabel
from .errors import IoFailure, MalformedLiteratureFile
from .metrics import MetricsReport

ARCH_DISPLAY = {
    "resnet50": "ResNet50",
    "resnet101": "ResNet101",
    "effnet_b0": "EfficientNet-B0",
    "effnet_b1": "EfficientNet-B1",
    "effnet_b3": "EfficientNet-B3",
    "tiny_cnn": "TinyCNN",
}


class RowSource(str, Enum):
    LITERATURE = "LITERATURE"
    THIS_RUN = "THIS_RUN"


@dataclass(frozen=True)
class ComparisonRow:
    method_name: str
    description: str
    f1_percent: float
    source: RowSource


def _quantize_percent(value: float) -> str:
    return str(Decimal(repr(value)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def format_percent(ratio: float | None) -> str:
    """ratio in [0,1] -> percentage with 2 decimals, half-even rounding."""
    if ratio is None:
        return "n/a"
    return _quantize_percent(ratio * 100.0)


_METRIC_COLUMNS = [
    "method", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct", "auc_pct",
    "macro_precision_pct", "macro_recall_pct", "macro_f1_pct",
]


def _metric_row(spec: ModelSpec, report: MetricsReport) -> dict[str, str]:
    pos = ClassLabel.ALL
    return {
        "method": ARCH_DISPLAY.get(spec.arch, spec.arch),
        "accuracy_pct": format_percent(report.accuracy),
        "precision_pct": format_percent(report.precision_per_class[pos]),
        "recall_pct": format_percent(report.recall_per_class[pos]),
        "f1_pct": format_percent(report.f1_per_class[pos]),
        "auc_pct": format_percent(report.auc),
        "macro_precision_pct": format_percent(report.macro_precision),
        "macro_recall_pct": format_percent(report.macro_recall),
        "macro_f1_pct": format_percent(report.macro_f1),
    }


def _to_csv(columns: list[str], rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _to_markdown(columns: list[str], rows: list[dict[str, str]]) -> str:
    header = "| " + " | ".join(columns) + " |"
    rule = "|" + "|".join("---" for _ in columns) + "|"
    lines = [header, rule]
    lines.extend("| " + " | ".join(r[c] for c in columns) + " |" for r in rows)
    return "\n".join(lines) + "\n"


def emit_metrics_table(
    reports: list[tuple[ModelSpec, MetricsReport]],
    fmt: str = "csv",
) -> str:
    """One row per model, input order preserved."""
    if not reports:
        raise IoFailure("no reports to tabulate")
    rows = [_metric_row(spec, report) for spec, report in reports]
    if fmt == "csv":
        return _to_csv(_METRIC_COLUMNS, rows)
    if fmt == "md":
        return _to_markdown(_METRIC_COLUMNS, rows)
    raise IoFailure(f"unknown table format {fmt!r}")


def parse_metrics_table(text: str) -> list[dict[str, str]]:
    """Read back the CSV emitted by emit_metrics_table."""
    return list(csv.DictReader(io.StringIO(text)))


def bundled_literature_path() -> Path:
    return Path(resources.files("leukopipe.data") / "comparison_table.toml")


def load_literature(path: Path | str | None = None) -> list[ComparisonRow]:
    """Parse a TOML file of published comparison rows."""
    source = Path(path) if path is not None else bundled_literature_path()
    try:
        payload = tomllib.loads(source.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read literature file {source}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise MalformedLiteratureFile(f"{source}: {exc}") from exc

    rows = payload.get("row")
    if not isinstance(rows, list):
        raise MalformedLiteratureFile(f"{source}: missing [[row]] entries")
    out = []
    for i, row in enumerate(rows):
        try:
            out.append(ComparisonRow(
                method_name=str(row["method"]),
                description=str(row["description"]),
                f1_percent=float(row["f1_percent"]),
                source=RowSource.LITERATURE,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLiteratureFile(
                f"{source}: row {i} is malformed: {exc}") from exc
    return out


_COMPARISON_COLUMNS = ["method", "description", "f1_pct", "source"]


def emit_comparison(
    own_f1: float,
    literature: list[ComparisonRow],
    fmt: str = "csv",
    own_name: str = "This run",
    own_description: str = "Pipeline result on the held-out test split",
) -> str:
    """All rows sorted by descending F1, this run's row marked THIS_RUN."""
    if not literature:
        warnings.warn("empty literature list: comparison has a single row",
                      stacklevel=2)
    own = ComparisonRow(
        method_name=own_name,
        description=own_description,
        f1_percent=own_f1 * 100.0,
        source=RowSource.THIS_RUN,
    )
    ordered = sorted([own, *literature], key=lambda r: -r.f1_percent)
    rows = []
    for r in ordered:
        name = r.method_name
        if fmt == "md" and r.source is RowSource.THIS_RUN:
            name = f"**{name}**"
        rows.append({
            "method": name,
            "description": r.description,
            "f1_pct": _quantize_percent(r.f1_percent),
            "source": r.source.value,
        })
    if fmt == "csv":
        return _to_csv(_COMPARISON_COLUMNS, rows)
    if fmt == "md":
        return _to_markdown(_COMPARISON_COLUMNS, rows)
    raise IoFailure(f"unknown table format {fmt!r}")
