"""CSV ingestion: comma-separated, UTF-8, ``.`` decimal point, optional header."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .models import Sample

__all__ = ["read_csv_sample", "select_columns"]


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_csv_sample(path, columns=None, header: bool | None = None) -> Sample:
    """
    Load observations, one per row.

    Parameters
    ----------
    columns : list or dict, optional
        Column selection by index or header name. A dict maps the roles
        ``y``, ``w``, ``z`` (linear-iv) to columns and is assembled in that
        order. Default: all columns.
    header : bool, optional
        Force header handling; by default the first row is a header when any
        of its cells is not numeric.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise ConfigurationError(f"{path} is not valid UTF-8") from None
    if not rows:
        raise ConfigurationError(f"{path} contains no data")
    if header is None:
        header = not all(_is_number(c.strip()) for c in rows[0])
    names = [c.strip() for c in rows[0]] if header else None
    body = rows[1:] if header else rows
    first_line = 2 if header else 1
    width = len(rows[0])
    data = np.empty((len(body), width))
    for i, row in enumerate(body):
        if len(row) != width:
            raise ConfigurationError(f"{path}: row {i + first_line} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell.strip())
            except ValueError:
                raise ConfigurationError(
                    f"{path}: row {i + first_line}, column {j + 1}: cannot parse {cell!r} as a number"
                ) from None
    if data.shape[0] == 0:
        raise ConfigurationError(f"{path} has a header but no observations")
    if columns is not None:
        data = data[:, select_columns(columns, names, width)]
    return Sample(data)


def select_columns(columns, names, width) -> list[int]:
    """Resolve a column selection (indices, names or a y/w/z role mapping) to indices."""
    if isinstance(columns, dict):
        unknown = set(columns) - {"y", "w", "z"}
        if unknown:
            raise ConfigurationError(f"unknown column roles {sorted(unknown)}; expected y, w, z")
        ordered = []
        for role in ("y", "w", "z"):
            if role not in columns:
                raise ConfigurationError(f"column mapping is missing role {role!r}")
            sel = columns[role]
            ordered.extend(sel if isinstance(sel, (list, tuple)) else [sel])
        columns = ordered
    out = []
    for c in columns:
        if isinstance(c, str):
            if names is None or c not in names:
                raise ConfigurationError(f"column {c!r} not found in the CSV header")
            out.append(names.index(c))
        else:
            if not 0 <= int(c) < width:
                raise ConfigurationError(f"column index {c} out of range for {width} columns")
            out.append(int(c))
    return out
