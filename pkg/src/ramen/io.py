"""File formats: dataset CSV, truth/selection JSON, atomic writes."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .invariance import LossTable, Objective
from .scm import EnvData, MultiEnvDataset
from .search import SelectionResult


class DatasetFormatError(ValueError):
    pass


def fmt(x: float) -> str:
    """Locale-independent decimal with 17 significant digits (exact round trip)."""
    return format(float(x), ".17g")


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(data: MultiEnvDataset) -> str:
    lines = [",".join(["env", "t", "y"] + [f"x{j}" for j in range(data.d)])]
    for e, env in enumerate(data.envs):
        for i in range(env.n):
            row = [str(e), str(int(env.T[i])), fmt(env.Y[i])] + [fmt(v) for v in env.X[i]]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_dataset(path, data: MultiEnvDataset):
    atomic_write(path, dataset_to_csv(data))


def _parse_float(text, line, col):
    try:
        value = float(text)
    except ValueError:
        raise DatasetFormatError(f"row {line}, column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DatasetFormatError(f"row {line}, column {col!r}: non-finite value {text!r}")
    return value


def read_dataset(path) -> MultiEnvDataset:
    """Parse the ``env,t,y,x0,...`` CSV. Errors name the offending row and column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file") from None
        d = len(header) - 3
        expected = ["env", "t", "y"] + [f"x{j}" for j in range(max(d, 0))]
        if header != expected:
            raise DatasetFormatError(
                f"bad header {','.join(header)!r}; expected 'env,t,y,x0,...,x{{d-1}}'"
            )
        rows: dict[int, list] = {}
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DatasetFormatError(f"row {line}: {len(rec)} fields, expected {len(header)}")
            try:
                env = int(rec[0])
            except ValueError:
                raise DatasetFormatError(f"row {line}, column 'env': not an integer: {rec[0]!r}") from None
            if env < 0:
                raise DatasetFormatError(f"row {line}, column 'env': negative index {env}")
            if rec[1] not in ("0", "1"):
                raise DatasetFormatError(f"row {line}, column 't': treatment must be 0 or 1, got {rec[1]!r}")
            y = _parse_float(rec[2], line, "y")
            xs = [_parse_float(v, line, header[3 + j]) for j, v in enumerate(rec[3:])]
            rows.setdefault(env, []).append((float(rec[1]), y, xs))
    if not rows:
        raise DatasetFormatError("no data rows")
    missing = sorted(set(range(max(rows) + 1)) - set(rows))
    if missing:
        raise DatasetFormatError(f"environment indices must be contiguous from 0; missing {missing}")
    envs = []
    for e in range(len(rows)):
        T = np.array([r[0] for r in rows[e]])
        Y = np.array([r[1] for r in rows[e]])
        X = np.array([r[2] for r in rows[e]], dtype=float).reshape(len(T), d)
        envs.append(EnvData(X, T, Y))
    try:
        return MultiEnvDataset(envs)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None


def write_json(path, payload):
    atomic_write(path, json.dumps(payload, indent=2) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def selection_from_json(payload: dict) -> SelectionResult:
    """Rebuild a (table-less) selection from its JSON form."""
    subset = tuple(int(j) for j in payload["subset"])
    node = payload.get("node", "Y")
    if node not in ("T", "Y"):
        raise ValueError(f"selection node must be 'T' or 'Y', got {node!r}")
    losses = payload.get("losses", {})
    table = LossTable(mode=losses.get("mode", "max"))
    inf = float("inf")
    table.scores[subset] = Objective(losses.get("J_T", inf), losses.get("J_Y", inf),
                                     losses.get("combined", inf), node)
    return SelectionResult(subset, node, table, payload.get("method", "unknown"),
                           int(payload.get("seed", 0)))
