from __future__ import annotations

from collections.abc import Sequence
import csv
import io
import math
from pathlib import Path

from pydantic import ValidationError

from box6d.exceptions import CSVRowError, DatasetIOError, ResultsFormatError
from box6d.schemas import ResultRow
from box6d.services.dimsearch import TRACE_COLUMNS

RESULT_COLUMNS = tuple(ResultRow.model_fields)
TRACE_HEADER = ("scene_id", "instance_id", *TRACE_COLUMNS)


def _fmt(value: object) -> str:
    if isinstance(value, bool) or not isinstance(value, float):
        return str(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def _write(path: Path, header: Sequence[str], rows: Sequence[dict[str, object]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[column]) for column in header])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buffer.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(path, f"cannot write: {exc.strerror or exc}") from exc


def write_results(path: Path, rows: Sequence[ResultRow]) -> None:
    _write(path, RESULT_COLUMNS, [row.model_dump() for row in rows])


def write_traces(path: Path, rows: Sequence[dict[str, object]]) -> None:
    _write(path, TRACE_HEADER, rows)


def read_results(path: Path) -> list[ResultRow]:
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise DatasetIOError(path, f"cannot read: {exc.strerror or exc}") from exc

    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ResultsFormatError(path, [CSVRowError(0, "Missing header row")])
    missing = set(RESULT_COLUMNS) - {name.strip() for name in reader.fieldnames}
    if missing:
        raise ResultsFormatError(path, [CSVRowError(0, f"Missing column(s): {', '.join(sorted(missing))}")])

    rows: list[ResultRow] = []
    errors: list[CSVRowError] = []
    for index, raw in enumerate(reader, start=1):
        try:
            rows.append(ResultRow.model_validate({column: raw[column] for column in RESULT_COLUMNS}))
        except ValidationError as exc:
            first = exc.errors()[0]
            errors.append(CSVRowError(index, f"{'.'.join(map(str, first['loc']))}: {first['msg']}"))
    if errors:
        raise ResultsFormatError(path, errors)
    return rows
