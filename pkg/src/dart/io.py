"""File formats: CSV inputs, result files and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import time
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DistanceMatrix, PValueVector, ValidationError, validate_distance_matrix

MANIFEST_NAME = "manifest.json"


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_rows(path: str | Path) -> list[tuple[int, list[str]]]:
    """Nonblank CSV rows with their 1-based line numbers."""
    try:
        with open(path, newline="") as fh:
            rows = [(i, [c.strip() for c in row]) for i, row in enumerate(csv.reader(fh), start=1)]
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: file not found") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise ValidationError(f"{path}: unreadable CSV ({exc})") from exc
    rows = [(i, r) for i, r in rows if any(r)]
    if not rows:
        raise ValidationError(f"{path}: file is empty")
    return rows


def _strip_header(rows):
    """Drop a leading row that is not entirely numeric."""
    if rows and not all(_is_number(c) for c in rows[0][1] if c):
        return rows[1:]
    return rows


def _parse_float(path, line: int, cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ValidationError(f"{path}:{line}: not a number: {cell!r}") from None


def read_numeric_table(path: str | Path, ncol: int | None = None) -> np.ndarray:
    """Dense numeric CSV with an optional header row."""
    rows = _strip_header(_read_rows(path))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    width = len(rows[0][1]) if ncol is None else ncol
    out = np.empty((len(rows), width))
    for k, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise ValidationError(f"{path}:{line}: expected {width} columns, found {len(cells)}")
        out[k] = [_parse_float(path, line, c) for c in cells]
    return out


def read_pvalues(path: str | Path) -> PValueVector:
    """One p-value per line, or ``feature_id,p`` pairs with 1-based ids."""
    rows = _strip_header(_read_rows(path))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width not in (1, 2):
        raise ValidationError(f"{path}:{rows[0][0]}: expected 1 or 2 columns, found {width}")
    ids, vals = [], []
    for line, cells in rows:
        if len(cells) != width:
            raise ValidationError(f"{path}:{line}: expected {width} columns, found {len(cells)}")
        v = _parse_float(path, line, cells[-1])
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{path}:{line}: p-value {v} outside [0, 1]")
        vals.append(v)
        if width == 2:
            ident = _parse_float(path, line, cells[0])
            if ident != int(ident):
                raise ValidationError(f"{path}:{line}: feature id must be an integer")
            ids.append(int(ident))
    vals = np.array(vals)
    if width == 2:
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValidationError(f"{path}: feature ids must be 1..{len(ids)}, each once")
        out = np.empty_like(vals)
        out[np.array(ids) - 1] = vals
        vals = out
    return PValueVector(vals)


def read_distance_matrix(path: str | Path, normalize: bool = False) -> DistanceMatrix:
    """Square distance matrix, optionally with a header row and/or a label column."""
    rows = _read_rows(path)
    rows = _strip_header(rows)
    if rows and len(rows[0][1]) == len(rows) + 1:
        rows = [(line, cells[1:]) for line, cells in rows]
    m = len(rows)
    data = np.empty((m, m))
    for k, (line, cells) in enumerate(rows):
        if len(cells) != m:
            raise ValidationError(f"{path}:{line}: expected {m} columns, found {len(cells)}")
        data[k] = [_parse_float(path, line, c) for c in cells]
    try:
        return validate_distance_matrix(data, normalize=normalize)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def read_coords(path: str | Path) -> np.ndarray:
    return read_numeric_table(path, ncol=2)


def write_matrix(path: str | Path, a: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(a):
            w.writerow([repr(float(x)) for x in row])


def write_index_list(path: str | Path, features: Iterable[int]) -> None:
    """0-based feature indices written 1-based, one per line."""
    with open(path, "w") as fh:
        for f in sorted(features):
            fh.write(f"{f + 1}\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible builds
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(
    path: str | Path,
    command: str,
    config: dict,
    inputs: dict[str, str | Path] | None = None,
    seed: int | None = None,
    outputs: Iterable[str | Path] = (),
) -> dict:
    from . import __version__

    manifest = {
        "command": command,
        "config": config,
        "inputs": {
            name: {"path": str(p), "sha256": sha256_file(p)} for name, p in (inputs or {}).items()
        },
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timestamp": _timestamp(),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def verify_manifest(path: str | Path) -> list[str]:
    """Inputs whose current digest no longer matches the manifest."""
    with open(path) as fh:
        manifest = json.load(fh)
    return [
        name for name, rec in manifest["inputs"].items()
        if not Path(rec["path"]).exists() or sha256_file(rec["path"]) != rec["sha256"]
    ]
