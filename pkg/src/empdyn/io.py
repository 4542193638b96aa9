"""Serialization of estimates to CSV and JSON with provenance headers.

Every CSV starts with one comment line ``# empdyn <version> config=<hash>
seed=<seed>`` followed by a single header row; every JSON object carries the
same provenance under ``"meta"``.  Floats are written with ``repr`` so that
reading a file back reproduces the arrays bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import ConfigError


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    """Short stable hash of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg_hash: str, seed: Optional[int]) -> dict:
    return {"artifact": "empdyn", "version": __version__, "config_hash": cfg_hash, "seed": seed}


def header_line(meta: dict) -> str:
    return f"empdyn {meta['version']} config={meta['config_hash']} seed={meta['seed']}"


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_table(path, columns: Sequence[str], rows, meta: dict) -> None:
    """Write rows (iterable of sequences) under a provenance comment and header."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header_line(meta)}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_columns(path, named: Dict[str, np.ndarray], meta: dict) -> None:
    cols = list(named)
    arrs = [np.asarray(named[c]) for c in cols]
    write_table(path, cols, zip(*arrs), meta)


def write_matrix(path, t: np.ndarray, A: np.ndarray, meta: dict) -> None:
    """Dense matrix with a leading ``t`` column; header names the column times by index."""
    cols = ["t"] + [f"s{j}" for j in range(A.shape[1])]
    write_table(path, cols, ([ti, *row] for ti, row in zip(t, A)), meta)


def read_table(path) -> Tuple[List[str], np.ndarray]:
    """Inverse of :func:`write_table` for all-numeric tables."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing input file {path}")
    header = None
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if header is None:
                header = fields
                continue
            rows.append([float(x) for x in fields])
    if header is None:
        raise ConfigError(f"{path}: empty table")
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def read_matrix(path) -> Tuple[np.ndarray, np.ndarray]:
    _, arr = read_table(path)
    return arr[:, 0], arr[:, 1:]


def write_json(path, payload: dict, meta: dict) -> None:
    doc = {"meta": meta}
    doc.update(payload)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing input file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
