"""JSONL and embedding-sidecar persistence.

Every intermediate artifact is a JSONL file (one record per line) so each
pipeline stage stays independently inspectable and resumable. Embedding
matrices live in a binary sidecar (`<prefix>.npy` + `<prefix>.ids.json`)
keyed by id, so large vectors never bloat the text records. All writes are
atomic (temp file in the same directory, then rename).
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class JsonlError(Exception):
    """Malformed JSONL content, reported with its line number."""


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    # sort_keys keeps artifacts byte-stable across runs
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def save_jsonl(records: Iterable[dict], path: str | Path) -> int:
    """Write one JSON object per line, atomically. Returns the record count."""
    lines = [dump_json(rec) for rec in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc


def load_jsonl(path: str | Path) -> list[dict]:
    return list(iter_jsonl(path))


def save_json(obj, path: str | Path) -> None:
    atomic_write_text(path, dump_json(obj) + "\n")


def load_json(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class EmbeddingStore:
    """Immutable id -> vector map backed by one dense float matrix."""

    def __init__(self, ids: list[str], matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError(
                f"matrix shape {matrix.shape} does not match {len(ids)} ids"
            )
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embedding matrix contains non-finite values")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in embedding store")
        self._ids = list(ids)
        self._matrix = matrix
        self._index = {key: i for i, key in enumerate(ids)}

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def vector(self, key: str) -> np.ndarray:
        return self._matrix[self._index[key]]

    def row(self, key: str) -> int:
        return self._index[key]

    def subset(self, keys: list[str]) -> np.ndarray:
        rows = [self._index[k] for k in keys]
        return self._matrix[rows]

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        buf = _npy_bytes(self._matrix.astype(np.float32))
        atomic_write_bytes(prefix.with_suffix(".npy"), buf)
        atomic_write_text(
            prefix.with_suffix(".ids.json"), dump_json(self._ids) + "\n"
        )

    @classmethod
    def load(cls, prefix: str | Path) -> "EmbeddingStore":
        prefix = Path(prefix)
        with open(prefix.with_suffix(".ids.json"), encoding="utf-8") as fh:
            ids = json.load(fh)
        matrix = np.load(prefix.with_suffix(".npy")).astype(np.float64)
        return cls(ids, matrix)

    @classmethod
    def exists(cls, prefix: str | Path) -> bool:
        prefix = Path(prefix)
        return prefix.with_suffix(".npy").exists() and prefix.with_suffix(
            ".ids.json"
        ).exists()


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()
