"""CSV trace rows shared by the framework driver and the CLI."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass

COLUMNS = ("outer", "inner", "wall_ns", "ifo", "iso", "f", "grad_norm", "min_eig", "phase")
PHASES = ("gfo", "check", "hfo")


@dataclass(frozen=True)
class TraceRow:
    outer: int
    inner: int
    wall_ns: int
    ifo: int
    iso: int
    f: float
    grad_norm: float
    min_eig: float | None
    phase: str


def format_real(x):
    if x is None:
        return ""
    if math.isnan(x) or math.isinf(x):
        return repr(float(x))
    return f"{x:.17g}"


def _parse_real(s):
    return None if s == "" else float(s)


def render_trace(rows, header=None, timing="header") -> str:
    """CSV text for ``rows``.

    ``header`` maps keys to values written as ``# key=value`` comment lines.
    With ``timing="header"`` the ``wall_ns`` column is written as 0 and the
    total wall time goes into a comment, so bodies of replayed runs are
    byte-identical; ``timing="rows"`` writes the measured per-row times.
    """
    if timing not in ("header", "rows"):
        raise ValueError(f"timing must be 'header' or 'rows', got {timing!r}")
    buf = io.StringIO()
    for key, value in (header or {}).items():
        buf.write(f"# {key}={value}\n")
    if timing == "header":
        total = rows[-1].wall_ns if rows else 0
        buf.write(f"# total_wall_ns={total}\n")
        buf.write("# wall_ns column zeroed; rerun with timing=rows for per-row times\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        wall = r.wall_ns if timing == "rows" else 0
        w.writerow([r.outer, r.inner, wall, r.ifo, r.iso, format_real(r.f),
                    format_real(r.grad_norm), format_real(r.min_eig), r.phase])
    return buf.getvalue()


def write_text_atomic(path, text):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".part")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_trace(rows, path, header=None, timing="header"):
    write_text_atomic(path, render_trace(list(rows), header, timing))


def read_trace(path):
    """Parse a trace file back into ``(header, rows)``."""
    header = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key] = value
        else:
            body.append(line)
    reader = csv.reader(body)
    cols = next(reader, None)
    if cols is None:
        return header, []
    if tuple(cols) != COLUMNS:
        raise ValueError(f"{path}: unexpected trace columns {cols}")
    rows = [TraceRow(int(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]),
                     float(r[5]), float(r[6]), _parse_real(r[7]), r[8]) for r in reader]
    return header, rows


def trace_body(path):
    """The non-comment part of a trace file, for replay comparisons."""
    with open(path) as fh:
        return "".join(line for line in fh if not line.startswith("#"))
