"""CSV ingestion and export of clustered binary data.

Columns: ``cluster`` and ``y`` are required; ``subject`` (three-level data)
and ``time`` (integer positions for AR(1) lags) are optional; every other
column is a numeric covariate.  An intercept column is prepended unless
``intercept=False``.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import ArgumentError, ParseError

RESERVED = ("cluster", "subject", "time", "y")
NA_TOKENS = {"", "na", "nan", "null", "none", "."}
INTERCEPT = "(Intercept)"


def _integer(text: str, what: str, row: int) -> int:
    if text.strip().lower() in NA_TOKENS:
        raise ParseError(f"missing value in column {what!r}", row)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"column {what!r} must be an integer, got {text!r}", row) from None
    if not math.isfinite(v) or not v.is_integer():
        raise ParseError(f"column {what!r} must be an integer, got {text!r}", row)
    return int(v)


def _number(text: str, what: str, row: int) -> float:
    if text.strip().lower() in NA_TOKENS:
        raise ParseError(f"missing value in column {what!r}", row)
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"column {what!r} is not numeric: {text!r}", row) from None
    if not math.isfinite(v):
        raise ParseError(f"column {what!r} is not finite: {text!r}", row)
    return v


def read_csv(path, intercept: bool = True) -> Dataset:
    """Parse the standard format; rows are numbered from 2 (the header is row 1)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file: a header row is required", 1) from None
        lower = [h.lower() for h in header]
        for col in ("cluster", "y"):
            if col not in lower:
                raise ParseError(f"missing required column {col!r}", 1)
        if len(set(lower)) != len(lower):
            raise ParseError("duplicate column names", 1)
        idx = {name: lower.index(name) for name in RESERVED if name in lower}
        cov_cols = [k for k, name in enumerate(lower) if name not in RESERVED]
        cov_names = [header[k] for k in cov_cols]

        clusters, subjects, times, ys, rows = [], [], [], [], []
        for rownum, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(rec)}", rownum)
            clusters.append(_integer(rec[idx["cluster"]], "cluster", rownum))
            yv = _number(rec[idx["y"]], "y", rownum)
            if yv not in (0.0, 1.0):
                raise ParseError(f"y must be 0 or 1, got {rec[idx['y']]!r}", rownum)
            ys.append(int(yv))
            if "subject" in idx:
                subjects.append(_integer(rec[idx["subject"]], "subject", rownum))
            if "time" in idx:
                times.append(_integer(rec[idx["time"]], "time", rownum))
            rows.append([_number(rec[k], header[k], rownum) for k in cov_cols])
    if not ys:
        raise ParseError("no data rows", 2)
    X = np.array(rows, dtype=float).reshape(len(ys), len(cov_cols))
    if intercept:
        X = np.column_stack([np.ones(len(ys)), X])
        cov_names = [INTERCEPT] + cov_names
    if X.shape[1] == 0:
        raise ArgumentError("no covariates: add columns or keep the intercept")
    try:
        return Dataset.from_arrays(
            np.array(clusters),
            X,
            np.array(ys),
            positions=np.array(times) if times else None,
            subjects=np.array(subjects) if subjects else None,
            covariate_names=cov_names,
        )
    except ArgumentError as exc:
        raise ParseError(str(exc)) from None


def write_csv(dataset: Dataset, path) -> None:
    """Write the standard format; floats use ``repr`` so a re-read is lossless."""
    names = list(dataset.covariate_names)
    X = dataset.X
    if names and names[0] == INTERCEPT and np.all(X[:, 0] == 1.0):
        names, X = names[1:], X[:, 1:]
    header = ["cluster"] + (["subject"] if dataset.subjects is not None else []) + ["time", "y"] + names
    cl = np.repeat(dataset.cluster_labels, dataset.sizes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(dataset.n_obs):
            rec = [int(cl[r])]
            if dataset.subjects is not None:
                rec.append(int(dataset.subjects[r]))
            rec += [int(dataset.positions[r]), int(dataset.y[r])]
            rec += [repr(float(v)) for v in X[r]]
            w.writerow(rec)
