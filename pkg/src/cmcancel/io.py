"""Coupling text files and CSV tables with ``#`` metadata lines."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class CouplingFormatError(ValueError):
    pass


def parse_coupling(text: str, source: str = "<string>") -> np.ndarray:
    """One decimal tap per line; blank lines and ``#`` comments are skipped."""
    taps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            v = float(line)
        except ValueError:
            raise CouplingFormatError(f"{source}:{lineno}: not a decimal tap value: {raw!r}") from None
        if not np.isfinite(v):
            raise CouplingFormatError(f"{source}:{lineno}: tap value must be finite, got {raw!r}")
        taps.append(v)
    if not taps:
        raise CouplingFormatError(f"{source}: no taps found")
    return np.array(taps)


def read_coupling(path) -> np.ndarray:
    path = Path(path)
    return parse_coupling(path.read_text(), str(path))


def write_coupling(path, taps, header: list[str] | None = None) -> None:
    lines = [f"# {h}" for h in header or []]
    lines += [repr(float(t)) for t in taps]
    Path(path).write_text("\n".join(lines) + "\n")


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns: list[str], rows, meta: dict[str, object], footer: list[str] = ()) -> None:
    """Write ``# key=value`` metadata, a header row, data rows, then ``#`` footer lines."""
    with open(path, "w", newline="") as f:
        for k, v in meta.items():
            f.write(f"# {k}={v}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
        for line in footer:
            f.write(f"# {line}\n")


def read_csv(path) -> tuple[list[str], np.ndarray, list[str]]:
    """Header, float data (empty cells as NaN) and comment lines of a table."""
    comments, body = [], []
    with open(path) as f:
        for line in f:
            (comments if line.startswith("#") else body).append(line.rstrip("\n"))
    rows = list(csv.reader(body))
    header, data = rows[0], rows[1:]
    arr = np.array([[float(x) if x else np.nan for x in r] for r in data]) if data else np.zeros((0, len(header)))
    return header, arr, comments
