"""On-disk formats: the PRNT tensor container, PGM images, CSV tables.

PRNT container layout (all integers little-endian)::

    b"PRNT" | u32 version=1 | u32 count
    count x [u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 ndim | u64 dims[ndim] | payload]
    u64 meta_len | meta JSON utf-8

Every write goes to a temporary sibling and is renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

MAGIC = b"PRNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(tensors: Mapping[str, np.ndarray], meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def decode_container(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated container")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    if pos != len(view):
        raise FormatError("trailing bytes after metadata")
    return tensors, meta


def save_container(path, tensors: Mapping[str, np.ndarray], meta: dict):
    atomic_write(path, encode_container(tensors, meta))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------- images


def read_pgm(path) -> np.ndarray:
    """Load an 8-bit grayscale image as float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            im = im.convert("L")
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def encode_pgm(img: np.ndarray) -> bytes:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def write_pgm(path, img: np.ndarray):
    atomic_write(path, encode_pgm(img))


def write_image(path, img: np.ndarray):
    """PGM preview plus a raw little-endian float32 sidecar (``.f32``)."""
    path = Path(path)
    write_pgm(path, img)
    atomic_write(path.with_suffix(".f32"), np.asarray(img, dtype="<f4").tobytes())


def list_images(data_dir) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".pgm")


# ---------------------------------------------------------------- csv


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
