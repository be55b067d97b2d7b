"""Binary containers and CSV output.

Tensor container (checkpoints, noise tensors), all integers little-endian::

    magic        8 bytes  b"NSVITCK\\0"
    version      u32      currently 1
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (sorted keys)
    count        u32      number of tensor blocks
    count x block:
        name_len u16, name (UTF-8), ndim u8, dims (ndim x u32),
        data     prod(dims) little-endian float32 values, C order

Raw-tensor dataset::

    magic        8 bytes  b"NSVITDS\\0"
    version      u32      currently 1
    n, c, h, w   4 x u32
    images       n*c*h*w little-endian float32, C order (n, c, h, w)
    labels       n little-endian int32

CIFAR-10 binary: back-to-back 3073-byte records, one label byte followed by
3072 pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32x32).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import __version__
from .errors import ParseError

CONTAINER_MAGIC = b"NSVITCK\0"
DATASET_MAGIC = b"NSVITDS\0"
FORMAT_VERSION = 1
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated file: need {n} bytes for {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise ParseError(f"bad magic {got!r}, expected {expected!r}", offset=0)

    def version(self) -> None:
        offset = self.pos
        (version,) = self.unpack("<I", "version")
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported format version {version}", offset=offset)


def encode_container(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CONTAINER_MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> tuple[dict, dict]:
    r = _Reader(buf)
    r.magic(CONTAINER_MAGIC)
    r.version()
    (meta_len,) = r.unpack("<I", "meta length")
    meta_offset = r.pos
    try:
        meta = json.loads(r.take(meta_len, "meta block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable meta block: {exc}", offset=meta_offset) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last tensor block", offset=r.pos)
    return meta, tensors


def save_container(path, tensors: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_container(tensors, meta))


def load_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def encode_raw_dataset(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.ascontiguousarray(images, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise ValueError(f"images {images.shape} and labels {labels.shape} do not form a dataset")
    header = DATASET_MAGIC + struct.pack("<5I", FORMAT_VERSION, *images.shape)
    return header + images.tobytes() + labels.tobytes()


def decode_raw_dataset(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(buf)
    r.magic(DATASET_MAGIC)
    r.version()
    n, c, h, w = r.unpack("<4I", "dims")
    images = np.frombuffer(r.take(4 * n * c * h * w, "image block"), dtype="<f4").reshape(n, c, h, w)
    labels = np.frombuffer(r.take(4 * n, "label block"), dtype="<i4")
    if r.pos != len(buf):
        raise ParseError("trailing bytes after label block", offset=r.pos)
    return images.astype(np.float32), labels.astype(np.int64)


def decode_cifar10(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR-10 binary records; pixels are scaled to [0, 1]."""
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise ParseError(
            f"truncated CIFAR-10 file: {len(buf)} bytes is not a multiple of {CIFAR_RECORD}",
            offset=whole * CIFAR_RECORD,
        )
    n = len(buf) // CIFAR_RECORD
    records = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
    images = records[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def write_csv(path, header, rows, seed=None, extra: str = "") -> None:
    """Write rows with a header line and a trailing ``#`` metadata comment.

    Floats are written with ``repr`` so identical runs give identical bytes.
    """
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    trailer = f"# nsvit {__version__} seed={seed}"
    if extra:
        trailer += f" {extra}"
    lines.append(trailer)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list, list]:
    """Read a CSV written by :func:`write_csv`; returns (header, rows of strings)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        return [], []
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)

