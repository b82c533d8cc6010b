"""Delimited-text ingestion and export.

Datasets use a long layout, one row per (subject, visit)::

    subject_id,time,indicator,<covariate columns...>

Covariates must be constant within a subject and times strictly increasing
in file order.  Draw matrices carry a header ``beta_1..beta_k,
rho_star_1..rho_star_M,log_posterior`` and one draw per row.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DataError, PanelBinaryDataset, SubjectRecord, TimeGrid
from .sampler import PosteriorSamples

REQUIRED = ("subject_id", "time", "indicator")


class IngestError(DataError):
    pass


def fmt(x) -> str:
    """Shortest round-trip text for a number; ints stay ints."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def read_dataset(path, covariates: Sequence[str] | None = None) -> PanelBinaryDataset:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise IngestError(f"{path}: header lacks column(s) {', '.join(missing)}")
        if covariates is None:
            covariates = [h for h in header if h not in REQUIRED]
        else:
            absent = [c for c in covariates if c not in header]
            if absent:
                raise IngestError(f"{path}: unknown covariate column(s) {', '.join(absent)}")
        i_id, i_t, i_b = (header.index(c) for c in REQUIRED)
        i_x = [header.index(c) for c in covariates]

        order: list = []
        rows: dict = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            fields = [f.strip() for f in rec]
            for j, f in enumerate(fields):
                if f == "" or f.upper() in ("NA", "NAN"):
                    raise IngestError(f"{path}:{lineno}: missing value in column {header[j]!r}")
            sid = fields[i_id]
            try:
                t = float(fields[i_t])
                b = float(fields[i_b])
                x = [float(fields[j]) for j in i_x]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(t) or t <= 0:
                raise IngestError(f"{path}:{lineno}: time must be a positive number")
            if b not in (0.0, 1.0):
                raise IngestError(f"{path}:{lineno}: indicator must be 0 or 1")
            if sid not in rows:
                order.append(sid)
                rows[sid] = {"t": [], "b": [], "x": x, "line": lineno}
            r = rows[sid]
            if r["t"]:
                if t == r["t"][-1]:
                    raise IngestError(
                        f"{path}:{lineno}: duplicate time {t} for subject {sid!r}"
                    )
                if t < r["t"][-1]:
                    raise IngestError(
                        f"{path}:{lineno}: time {t} precedes earlier time {r['t'][-1]} "
                        f"for subject {sid!r}"
                    )
                if x != r["x"]:
                    raise IngestError(
                        f"{path}:{lineno}: covariates of subject {sid!r} differ from "
                        f"line {r['line']}"
                    )
            r["t"].append(t)
            r["b"].append(int(b))
    if not order:
        raise IngestError(f"{path}: no data rows")
    subjects = tuple(
        SubjectRecord(sid, rows[sid]["t"], rows[sid]["b"], rows[sid]["x"]) for sid in order
    )
    return PanelBinaryDataset(subjects, tuple(covariates))


def write_dataset(dataset: PanelBinaryDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*REQUIRED, *dataset.covariate_names])
        for s in dataset.subjects:
            xs = [fmt(v) for v in s.covariates]
            for t, b in zip(s.times, s.indicators):
                w.writerow([s.id, fmt(t), int(b), *xs])
    return path


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_draws(samples: PosteriorSamples, path) -> Path:
    return write_table(path, [*samples.param_names(), "log_posterior"], samples.matrix())


def read_draws(path) -> PosteriorSamples:
    header, rows = read_table(path)
    if not header or header[-1] != "log_posterior":
        raise IngestError(f"{path}: last column must be log_posterior")
    k = sum(h.startswith("beta_") for h in header)
    m = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return PosteriorSamples(draws=m[:, :-1], log_posts=m[:, -1], k=k)


def write_grid(grid: TimeGrid, path) -> Path:
    return write_table(path, ["m", "t"], ((m + 1, t) for m, t in enumerate(grid.points)))


def read_grid(path) -> TimeGrid:
    _, rows = read_table(path)
    return TimeGrid(np.array([float(r[1]) for r in rows]))


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
