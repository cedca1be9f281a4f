"""
Per-step experiment records and their CSV form.

ResultRow is the CSV row: one pruning iteration of one signal and seed.
SummaryRow is one line of a sweep summary. Floats are written with six
decimals, lines end in LF, and the header comes first.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Optional, Type, TypeVar

from pydantic import BaseModel, Field

from prunetax.core.storage import atomic_write_text


class ExperimentRecord(BaseModel):
    """State after one pruning iteration (and its retraining, if any)."""

    step: int = Field(ge=0)
    pruned_layer: int
    pruned_channel: int
    saliency: Optional[float] = None  # S of the removed channel; not part of the CSV row
    sparsity: float = Field(ge=0, le=1)
    train_acc: float
    test_acc: float
    retrain_steps: int = Field(ge=0)
    cumulative_retrain_steps: int = Field(ge=0)


class ResultRow(ExperimentRecord):
    signal_id: str
    seed: int

    @classmethod
    def from_record(cls, record: ExperimentRecord, signal_id: str, seed: int) -> ResultRow:
        return cls(signal_id=signal_id, seed=seed, **record.model_dump())


RESULT_FIELDS = (
    "signal_id", "seed", "step", "pruned_layer", "pruned_channel",
    "sparsity", "train_acc", "test_acc", "retrain_steps", "cumulative_retrain_steps",
)


class SummaryRow(BaseModel):
    """Outcome of one signal in a sweep; failed runs carry status 'error'."""

    signal_id: str
    seed: int
    retrain: str
    status: str = "ok"
    steps: int = 0
    initial_test_acc: Optional[float] = None
    sparsity_at_1pct: Optional[float] = None
    test_acc_at_1pct: Optional[float] = None
    retrain_steps_at_1pct: Optional[int] = None
    sparsity_at_stop: Optional[float] = None
    test_acc_at_stop: Optional[float] = None
    cumulative_retrain_steps: Optional[int] = None
    message: str = ""


SUMMARY_FIELDS = tuple(SummaryRow.model_fields)

Row = TypeVar("Row", bound=BaseModel)


def _format(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rows_to_csv(rows: Iterable[BaseModel], fields: tuple[str, ...]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        data = row.model_dump()
        writer.writerow([_format(data[name]) for name in fields])
    return buffer.getvalue()


def write_results_csv(path: Path, rows: Iterable[ResultRow]) -> Path:
    return atomic_write_text(path, rows_to_csv(rows, RESULT_FIELDS), prefix="results_")


def write_summary_csv(path: Path, rows: Iterable[SummaryRow]) -> Path:
    return atomic_write_text(path, rows_to_csv(rows, SUMMARY_FIELDS), prefix="summary_")


def read_csv_rows(path: Path, model: Type[Row]) -> list[Row]:
    """Parse a CSV written by this module; empty cells take the field default."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [
            model.model_validate({k: v for k, v in raw.items() if k in model.model_fields and v != ""})
            for raw in reader
        ]


def read_results_csv(path: Path) -> list[ResultRow]:
    return read_csv_rows(path, ResultRow)


def read_summary_csv(path: Path) -> list[SummaryRow]:
    return read_csv_rows(path, SummaryRow)
