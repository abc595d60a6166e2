"""File formats: dataset ingestion, result tables, and config echo.

Time series are CSV with rows = units (first column the unit label);
covariates are CSV with a header; manifests and configs are YAML.  Numbers
are serialized with 17 significant digits so round trips are bit exact.
Every output table starts with a '#'-prefixed metadata block followed by a
header row.
"""
from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import NonFiniteValue, ParseError, ShapeMismatch
from .propensity import CovariateTable
from .var import TimeSeriesPanel

FLOAT_FMT = "{:.17g}"


def format_float(x: float) -> str:
    return FLOAT_FMT.format(float(x))


def _metadata_lines(metadata: dict) -> list[str]:
    lines = [f"# gcipw-version: {__version__}"]
    for key in sorted(metadata):
        value = metadata[key]
        if isinstance(value, (dict, list, tuple)):
            value = json.dumps(value, sort_keys=True)
        lines.append(f"# {key}: {value}")
    return lines


def write_table(path, header, rows, metadata=None):
    """CSV with a commented metadata block, header row, and 17-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    for line in _metadata_lines(metadata or {}):
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
        )
    path.write_text(buf.getvalue())


def read_table(path):
    """Rows of a CSV written by write_table; metadata lines are skipped."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            rows.append(row)
    if not rows:
        raise ParseError(f"{path} has no table content", path=str(path))
    return rows[0], rows[1:]


def write_panel_csv(path, panel: TimeSeriesPanel):
    header = ["unit"] + [f"t{t}" for t in range(panel.n_times)]
    rows = [
        [label] + [format_float(v) for v in panel.values[j]]
        for j, label in enumerate(panel.unit_labels)
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    path.write_text(buf.getvalue())


def read_panel_csv(path, subject_id="") -> TimeSeriesPanel:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"time series file not found: {path}", path=str(path))
    labels = []
    rows = []
    with path.open() as fh:
        reader = csv.reader(fh)
        try:
            next(reader)  # header
        except StopIteration:
            raise ParseError(f"{path} is empty", path=str(path), line=1) from None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            labels.append(row[0])
            values = []
            for col_no, cell in enumerate(row[1:], start=2):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}:{line_no}:{col_no}: not a number: {cell!r}",
                        path=str(path), line=line_no, column=col_no,
                    ) from None
                if not np.isfinite(v):
                    raise NonFiniteValue(
                        f"subject {subject_id!r}: non-finite value at unit "
                        f"{row[0]!r}, time {col_no - 2}"
                    )
                values.append(v)
            rows.append(values)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ShapeMismatch(f"{path}: rows have unequal lengths {sorted(lengths)}")
    return TimeSeriesPanel(np.array(rows), tuple(labels))


def write_covariates_csv(path, table: CovariateTable, covariate_names=None,
                         treatment_column="treatment"):
    q = table.q
    names = list(covariate_names) if covariate_names else [f"w{j}" for j in range(q)]
    header = ["subject_id"] + names + [treatment_column]
    rows = []
    for i, sid in enumerate(table.subject_ids):
        rows.append([sid] + [format_float(v) for v in table.values[i]]
                    + [int(table.treatment[i])])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    path.write_text(buf.getvalue())


def read_covariates_csv(path, treatment_column="treatment") -> CovariateTable:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"covariate file not found: {path}", path=str(path))
    with path.open() as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty", path=str(path), line=1) from None
        if treatment_column not in header:
            raise ParseError(
                f"{path}: treatment column {treatment_column!r} not in header",
                path=str(path), line=1,
            )
        z_col = header.index(treatment_column)
        cov_cols = [c for c in range(1, len(header)) if c != z_col]
        ids, values, treatment = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            ids.append(row[0])
            try:
                values.append([float(row[c]) for c in cov_cols])
                treatment.append(int(float(row[z_col])))
            except ValueError as exc:
                raise ParseError(
                    f"{path}:{line_no}: {exc}", path=str(path), line=line_no
                ) from None
    return CovariateTable(np.array(values), np.array(treatment), tuple(ids))


def load_dataset(manifest_path, require_equal_length=True):
    """Panels and the covariate table referenced by a study manifest.

    Validates shape, finiteness, and unit-label consistency across subjects.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ParseError(f"manifest not found: {manifest_path}", path=str(manifest_path))
    manifest = yaml.safe_load(manifest_path.read_text())
    if not isinstance(manifest, dict) or "subjects" not in manifest:
        raise ParseError(f"{manifest_path}: expected a mapping with 'subjects'",
                         path=str(manifest_path))
    base = manifest_path.parent
    treatment_column = manifest.get("treatment_column", "treatment")
    allow_unequal = bool(manifest.get("allow_unequal_lengths", False))
    min_length = manifest.get("min_length")
    panels = []
    ids = []
    for entry in manifest["subjects"]:
        sid = str(entry["id"])
        panel = read_panel_csv(base / entry["file"], subject_id=sid)
        if min_length is not None and panel.n_times < int(min_length):
            raise ShapeMismatch(
                f"subject {sid!r}: T={panel.n_times} below minimum {min_length}"
            )
        panels.append(panel)
        ids.append(sid)
    labels = panels[0].unit_labels
    lengths = {p.n_times for p in panels}
    for sid, panel in zip(ids, panels):
        if panel.unit_labels != labels:
            raise ShapeMismatch(
                f"subject {sid!r}: unit labels differ from the first subject"
            )
    if require_equal_length and not allow_unequal and len(lengths) != 1:
        raise ShapeMismatch(
            f"subjects have unequal T {sorted(lengths)}; set allow_unequal_lengths"
        )
    table = read_covariates_csv(base / manifest["covariates"], treatment_column)
    if tuple(table.subject_ids) != tuple(ids):
        raise ShapeMismatch("covariate subject order differs from manifest order")
    return panels, table


def write_config_echo(path, resolved: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(resolved, sort_keys=True))


def pair_label(j1: int, j2: int) -> str:
    return f"{j1}->{j2}"


def parse_pair_label(text: str) -> tuple[int, int]:
    a, b = text.split("->")
    return int(a), int(b)
