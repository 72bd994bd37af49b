"""Artifact formats: SBF1 tensors, binary PGM images, key = value manifests, CSV tables."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SBF_MAGIC = b"SBF1"


class FormatError(ValueError):
    pass


def write_sbf(path, array) -> None:
    """Write ``array`` as an SBF1 tensor (float64, little-endian, row-major)."""
    arr = np.array(array, dtype="<f8", order="C")
    header = SBF_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack("<%dI" % arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_sbf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SBF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from("<%dI" % ndim, raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(raw) - offset != 8 * count:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def write_pgm(path, image) -> None:
    """Write a 2D array as an 8-bit P5 image, min-max scaled. Row 0 of ``image`` is the first row."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM export needs a 2D array")
    lo, hi = float(np.min(img)), float(np.max(img))
    if hi > lo:
        scaled = np.round(255.0 * (img - lo) / (hi - lo))
    else:
        scaled = np.zeros_like(img)
    _write_pgm_bytes(path, scaled.astype(np.uint8))


def _write_pgm_bytes(path, pixels: np.ndarray) -> None:
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (width, height))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def write_pgm_raw(path, pixels) -> None:
    """Write already-quantized 8-bit pixels without rescaling."""
    _write_pgm_bytes(path, np.asarray(pixels, dtype=np.uint8))


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM; returns a (height, width) uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace before the raster
    width, height, maxval = tokens
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).copy()


def write_manifest(path, entries: Mapping[str, object]) -> None:
    with open(path, "w", newline="\n") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {format_value(value)}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def _csv_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
