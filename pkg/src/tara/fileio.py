"""Portable on-disk formats: raw float64 matrices and 16-bit PGM heatmaps."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .numerics import Matrix


class FileFormatError(ValueError):
    pass


def write_f64(m: Matrix, path: str | Path) -> None:
    """Raw little-endian float64, row-major, no header (shape lives in a sidecar)."""
    Path(path).write_bytes(m.tobytes())


def read_f64(path: str | Path, rows: int, cols: int) -> Matrix:
    blob = Path(path).read_bytes()
    want = rows * cols * 8
    if len(blob) != want:
        raise FileFormatError(f"{path}: expected {want} bytes for {rows}x{cols}, got {len(blob)}")
    return Matrix(np.frombuffer(blob, dtype="<f8").reshape(rows, cols))


def write_sidecar(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_pgm16(values: np.ndarray, path: str | Path) -> None:
    """Min-max normalized 16-bit grayscale PGM (P5, maxval 65535, big-endian).

    A constant input maps to all zeros rather than dividing by zero.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise FileFormatError(f"heatmap must be a nonempty 2-D array, got shape {a.shape}")
    lo, hi = a.min(), a.max()
    if hi > lo:
        scaled = (a - lo) / (hi - lo) * 65535.0
    else:
        scaled = np.zeros_like(a)
    pix = np.round(scaled).astype(">u2")
    h, w = a.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise FileFormatError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":  # comment line
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        fields.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 65535:
        raise FileFormatError(f"{path}: expected 16-bit maxval, got {maxval}")
    data = blob[i:]
    if len(data) != w * h * 2:
        raise FileFormatError(f"{path}: payload is {len(data)} bytes, expected {w * h * 2}")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
