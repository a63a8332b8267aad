"""
Stream Loader for CATE Watch
============================
Reads and writes observation streams in the two record formats:

- NDJSON, one object per line: {"t": int, "i": int, "y": float, "x": [floats], "z": 0/1}
- CSV with header t,i,y,x1..xd,z

Rows are grouped into one TimeBatch per time index, in increasing t.
"""

from __future__ import annotations

import io
import json
import logging
import sys
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from utils.model import CateWatchError, DimensionMismatch, TimeBatch

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("t", "i", "y", "x", "z")
FORMATS = ("ndjson", "csv")


def infer_format(path) -> str:
    """'csv' for .csv files, 'ndjson' for everything else (including stdin)"""
    return "csv" if str(path).lower().endswith(".csv") else "ndjson"


# =====================================================
# FRAMES <-> BATCHES
# =====================================================

def _covariate_columns(df):
    columns = [c for c in df.columns if c.startswith("x") and c[1:].isdigit()]
    return sorted(columns, key=lambda c: int(c[1:]))


def frame_to_batches(df: pd.DataFrame) -> list:
    """
    Group a long frame into batches

    Args:
        df: columns t, i, y, z plus either an 'x' column of sequences or
            x1..xd columns

    Returns:
        list: TimeBatch per distinct t, sorted by t
    """
    missing = [k for k in ("t", "i", "y", "z") if k not in df.columns]
    if missing:
        raise CateWatchError(f"Stream is missing required fields: {missing}")

    if "x" in df.columns:
        vectors = df["x"].map(lambda v: isinstance(v, (list, tuple, np.ndarray)))
        if not vectors.all():
            row = int(np.flatnonzero(~vectors.to_numpy())[0])
            t, subject, value = df["t"].iloc[row], df["i"].iloc[row], df["x"].iloc[row]
            raise CateWatchError(f"Covariates must be a list at t={t}, subject={subject}, got {value!r}")
        widths = df["x"].map(len)
        if widths.nunique() > 1:
            bad = df.loc[widths != widths.iloc[0]].iloc[0]
            raise DimensionMismatch(len(bad["x"]), int(widths.iloc[0]), t=int(bad["t"]), subject=int(bad["i"]))
        covariates = df["x"].tolist()
    else:
        columns = _covariate_columns(df)
        if not columns:
            raise CateWatchError("Stream has no covariate columns (x or x1..xd)")
        covariates = df[columns].to_numpy()

    try:
        X = np.array(covariates, dtype=float).reshape(len(df), -1)
        t = df["t"].to_numpy(dtype=np.int64)
        subjects = df["i"].to_numpy(dtype=np.int64)
        y = df["y"].to_numpy(dtype=float)
    except (TypeError, ValueError) as e:
        raise CateWatchError(f"Non-numeric stream field: {e}") from e
    z = df["z"].to_numpy()

    batches = []
    for value in np.unique(t):
        rows = t == value
        batches.append(TimeBatch(t=int(value), subjects=subjects[rows], y=y[rows], x=X[rows], z=z[rows]))
    return batches


def batches_to_frame(batches: Sequence[TimeBatch], layout="csv") -> pd.DataFrame:
    """Long frame with one row per observation; layout 'csv' spreads x into x1..xd"""
    frames = []
    for batch in batches:
        frame = pd.DataFrame({"t": batch.t, "i": batch.subjects, "y": batch.y})
        if layout == "csv":
            for j in range(batch.d):
                frame[f"x{j + 1}"] = batch.x[:, j]
        else:
            frame["x"] = [row.tolist() for row in batch.x]
        frame["z"] = batch.z.astype(np.int64)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=list(REQUIRED_KEYS))
    return pd.concat(frames, ignore_index=True)


# =====================================================
# READERS
# =====================================================

def load_ndjson(source) -> list:
    """Load an NDJSON stream from a path or a text buffer"""
    try:
        df = pd.read_json(source, lines=True, dtype=False, precise_float=True)
    except ValueError as e:
        raise CateWatchError(f"Malformed NDJSON stream: {e}") from e
    if df.empty:
        return []
    batches = frame_to_batches(df)
    logger.info(f"Loaded {len(df)} observations in {len(batches)} batches")
    return batches


def load_csv(source) -> list:
    """Load a CSV stream (header t,i,y,x1..xd,z)"""
    try:
        df = pd.read_csv(source, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CateWatchError(f"Malformed CSV stream: {e}") from e
    batches = frame_to_batches(df)
    logger.info(f"Loaded {len(df)} observations in {len(batches)} batches")
    return batches


def load_stream(path, fmt=None) -> list:
    """
    Load a whole stream from a file ('-' reads standard input)

    Args:
        path: file path or '-'
        fmt: 'ndjson' or 'csv'; inferred from the suffix when omitted

    Returns:
        list: TimeBatch objects sorted by t
    """
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise CateWatchError(f"Unknown stream format '{fmt}'; choose from {FORMATS}")
    if str(path) == "-":
        source = io.StringIO(sys.stdin.read())
    else:
        if not Path(path).exists():
            raise CateWatchError(f"Stream file not found: {path}")
        source = path
    return load_csv(source) if fmt == "csv" else load_ndjson(source)


def iter_ndjson_batches(lines: Iterable[str]) -> Iterator[TimeBatch]:
    """
    Incrementally group NDJSON lines into batches

    A batch is emitted as soon as a record with a different t arrives, so
    records must be grouped by period (as the simulator writes them).
    """
    current_t, rows = None, []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CateWatchError(f"Malformed NDJSON record on line {number}: {e}") from e
        missing = [k for k in REQUIRED_KEYS if k not in record]
        if missing:
            raise CateWatchError(f"Record on line {number} is missing {missing}")
        if current_t is not None and record["t"] != current_t:
            yield frame_to_batches(pd.DataFrame(rows))[0]
            rows = []
        current_t = record["t"]
        rows.append(record)
    if rows:
        yield frame_to_batches(pd.DataFrame(rows))[0]


# =====================================================
# WRITERS
# =====================================================

def write_stream(batches: Sequence[TimeBatch], path, fmt=None):
    """Write a stream as NDJSON or CSV ('-' writes standard output)"""
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise CateWatchError(f"Unknown stream format '{fmt}'; choose from {FORMATS}")
    if fmt == "csv":
        df = batches_to_frame(batches, layout="csv")
        df.to_csv(sys.stdout if str(path) == "-" else path, index=False, float_format="%.17g")
        count = len(df)
    else:
        # json.dumps keeps the shortest round-tripping repr of every float
        lines = [json.dumps(record) for record in ndjson_records(batches)]
        text = "\n".join(lines) + ("\n" if lines else "")
        if str(path) == "-":
            sys.stdout.write(text)
        else:
            Path(path).write_text(text)
        count = len(lines)
    logger.info(f"Wrote {count} observations to {path}")


def ndjson_records(batches: Sequence[TimeBatch]) -> Iterator[dict]:
    for batch in batches:
        for subject, y, x, z in zip(batch.subjects, batch.y, batch.x, batch.z):
            yield {"t": batch.t, "i": int(subject), "y": float(y), "x": x.tolist(), "z": int(z)}
