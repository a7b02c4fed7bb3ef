"""Binary container shared by the mel, embedding and codebook files.

Layout: magic bytes, one JSON header line terminated by ``\\n``, then a
row-major little-endian float32 matrix whose shape the header declares.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

FLOAT_LE = np.dtype("<f4")


def write_matrix(path: str | os.PathLike, magic: bytes, header: dict[str, Any], matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=FLOAT_LE)
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(line + b"\n")
        f.write(matrix.tobytes(order="C"))
    os.replace(tmp, path)


def read_header(f, magic: bytes, path) -> dict[str, Any]:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    line = f.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a record")
    return header


def read_matrix(path: str | os.PathLike, magic: bytes, rows_key: str, cols_key: str) -> tuple[dict[str, Any], np.ndarray]:
    """Read a container and return ``(header, matrix)``.

    The payload must hold exactly ``header[rows_key] * header[cols_key]``
    floats; anything shorter or longer is a format error.
    """
    with open(path, "rb") as f:
        header = read_header(f, magic, path)
        try:
            rows, cols = int(header[rows_key]), int(header[cols_key])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: header lacks {rows_key}/{cols_key}") from None
        if rows < 0 or cols < 0:
            raise FormatError(f"{path}: negative shape in header")
        payload = f.read()
    expected = rows * cols * FLOAT_LE.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    matrix = np.frombuffer(payload, dtype=FLOAT_LE).reshape(rows, cols).astype(np.float32)
    return header, matrix


def check_version(header: dict[str, Any], path, supported: int = 1) -> None:
    if header.get("version") != supported:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
