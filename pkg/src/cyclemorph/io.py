"""On-disk formats: DTF tensors, CMK checkpoints, PGM images, landmark CSV.

DTF layout: ``b"DTF1"``, u8 dtype code (0 = float32), u8 rank, rank x u32
little-endian extents, then little-endian row-major float32 payload.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

DTF_MAGIC = b"DTF1"
CMK_MAGIC = b"CMK1"
_DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    """Malformed or truncated file."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def dtf_bytes(array) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")  # ascontiguousarray would promote rank 0 to 1
    if arr.ndim > 255:
        raise FormatError("rank too large for DTF")
    head = DTF_MAGIC + struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def read_dtf_stream(f) -> np.ndarray:
    magic = _read_exact(f, 4, "DTF magic")
    if magic != DTF_MAGIC:
        raise FormatError(f"bad DTF magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(f, 2, "DTF header"))
    if code not in _DTYPES:
        raise FormatError(f"unknown DTF dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "DTF extents"))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, count * dtype.itemsize, "DTF payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


def save_dtf(path, array) -> None:
    atomic_write(path, dtf_bytes(array))


def load_dtf(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_dtf_stream(f)


def save_checkpoint(path, tensors: dict) -> None:
    """``b"CMK1"``, u32 count, then per entry u16 name length, UTF-8 name, DTF tensor."""
    out = bytearray(CMK_MAGIC + struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + dtf_bytes(arr)
    atomic_write(path, bytes(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a whole checkpoint; any defect raises before anything is returned."""
    with open(path, "rb") as f:
        data = f.read()
    f = io.BytesIO(data)
    magic = _read_exact(f, 4, "checkpoint magic")
    if magic != CMK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    (count,) = struct.unpack("<I", _read_exact(f, 4, "checkpoint count"))
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "entry name length"))
        name = _read_exact(f, n, "entry name").decode("utf-8")
        entries[name] = read_dtf_stream(f)
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint entries")
    return entries


def load_pgm(path) -> np.ndarray:
    """Binary (P5) PGM, 8- or 16-bit, scaled by maxval into [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError("truncated PGM payload")
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return (img.astype(np.float64) / maxval).astype(np.float32)


def save_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


AXIS_NAMES = {2: ["row", "col"], 3: ["depth", "row", "col"]}


def save_landmarks(path, points: np.ndarray) -> None:
    """One point per row; the header names the axis order."""
    points = np.asarray(points, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AXIS_NAMES.get(points.shape[1], [f"axis{i}" for i in range(points.shape[1])]))
    for p in points:
        writer.writerow([repr(float(v)) for v in p])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def load_landmarks(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"empty landmark file {path}")
    header, body = rows[0], rows[1:]
    pts = np.array([[float(v) for v in r] for r in body if r], dtype=np.float64)
    return pts.reshape(-1, len(header))


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def worker_count() -> int:
    """Thread cap from ``CYCLEMORPH_THREADS``; defaults to the CPU count."""
    raw = os.environ.get("CYCLEMORPH_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CYCLEMORPH_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CYCLEMORPH_THREADS must be a positive integer, got {raw!r}")
    return n
