"""Manifest CSV, PAMF binary tensors and sectioned checkpoints.

PAMF tensor file (little-endian)::

    b"PAMF" | version u32 = 1 | rank u32 | dims u32 * rank | f64 * prod(dims)

Checkpoints reuse the container with version 2 and named sections::

    b"PAMF" | version u32 = 2 | count u32 | section * count
    section = name_len u32 | name utf-8 | kind u8 | body
    kind 0 (tensor): rank u32 | dims u32 * rank | f64 payload
    kind 1 (text):   length u32 | utf-8 bytes
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PAMF"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 2
MANIFEST_FIELDS = ("sample_id", "identity", "camera", "split", "source")
SPLITS = ("train", "gallery", "query")

_KIND_TENSOR = 0
_KIND_TEXT = 1


class DataError(ValueError):
    """Malformed manifest, feature file or checkpoint."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    identity: str
    camera: str
    split: str
    source: str


# ------------------------------------------------------------- manifest


def load_manifest(path):
    """Parse and validate a manifest; ``source`` paths are made absolute."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records, seen = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise DataError(f"{path}:1: header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            values = dict(zip(MANIFEST_FIELDS, (v.strip() for v in row)))
            for name in ("sample_id", "identity", "camera", "source"):
                if not values[name]:
                    raise DataError(f"{path}:{lineno}: field '{name}' is empty")
            if values["split"] not in SPLITS:
                raise DataError(f"{path}:{lineno}: field 'split' has unknown value {values['split']!r}")
            sid = values["sample_id"]
            if sid in seen:
                raise DataError(f"{path}:{lineno}: field 'sample_id' duplicates line {seen[sid]} ({sid!r})")
            seen[sid] = lineno
            src = Path(values["source"])
            values["source"] = str(src if src.is_absolute() else base / src)
            records.append(SampleRecord(**values))
    return records


def write_manifest(path, records, relative_to=None):
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            src = Path(r.source)
            if src.is_absolute():
                try:
                    src = src.relative_to(base.resolve())
                except ValueError:
                    pass
            w.writerow([r.sample_id, r.identity, r.camera, r.split, src.as_posix()])


def split_records(records, split):
    return [r for r in records if r.split == split]


def load_features(records):
    """Stack the feature files of ``records`` into one array."""
    if not records:
        raise DataError("no records to load")
    arrays = [read_feature_file(r.source) for r in records]
    shape = arrays[0].shape
    for r, a in zip(records, arrays):
        if a.shape != shape:
            raise DataError(f"feature file for {r.sample_id} has shape {a.shape}, expected {shape}")
    return np.stack(arrays)


# ------------------------------------------------------------ binary I/O


def _pack_tensor(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        raise DataError("rank-0 tensors are not storable")
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to write non-finite values")
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def _unpack_tensor(buf, offset, where):
    if offset + 4 > len(buf):
        raise DataError(f"{where}: truncated before rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank == 0:
        raise DataError(f"{where}: rank-0 tensor")
    if offset + 4 * rank > len(buf):
        raise DataError(f"{where}: truncated inside shape header")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    nbytes = 8 * int(np.prod(dims, dtype=np.int64))
    if offset + nbytes > len(buf):
        raise DataError(
            f"{where}: payload truncated, shape {dims} needs {nbytes} bytes, {len(buf) - offset} present"
        )
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64)
    return arr.reshape(dims), offset + nbytes


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(path, expected_version):
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DataError(f"{path}: file too short for header")
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != expected_version:
        raise DataError(f"{path}: format version {version}, expected {expected_version}")
    return buf


def write_feature_file(path, array):
    """Store one array (feature map or descriptor) losslessly."""
    _atomic_write(path, MAGIC + struct.pack("<I", TENSOR_VERSION) + _pack_tensor(array))


def read_feature_file(path):
    buf = _read_header(path, TENSOR_VERSION)
    arr, end = _unpack_tensor(buf, 8, str(path))
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return arr


def write_sections(path, sections):
    """Write a checkpoint: ``sections`` maps names to arrays or strings."""
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sections))]
    for name, value in sections.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        if isinstance(value, str):
            text = value.encode("utf-8")
            parts.append(struct.pack("<BI", _KIND_TEXT, len(text)) + text)
        else:
            parts.append(struct.pack("<B", _KIND_TENSOR) + _pack_tensor(value))
    _atomic_write(path, b"".join(parts))


def read_sections(path):
    buf = _read_header(path, CHECKPOINT_VERSION)
    if len(buf) < 12:
        raise DataError(f"{path}: truncated section count")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset, out = 12, {}
    for k in range(count):
        where = f"{path}: section {k}"
        if offset + 4 > len(buf):
            raise DataError(f"{where}: truncated name length")
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + nlen + 1 > len(buf):
            raise DataError(f"{where}: truncated name")
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        kind = buf[offset]
        offset += 1
        if kind == _KIND_TENSOR:
            out[name], offset = _unpack_tensor(buf, offset, f"{path}: section {name!r}")
        elif kind == _KIND_TEXT:
            if offset + 4 > len(buf):
                raise DataError(f"{where}: truncated text length")
            (tlen,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            if offset + tlen > len(buf):
                raise DataError(f"{path}: section {name!r} text truncated")
            out[name] = buf[offset : offset + tlen].decode("utf-8")
            offset += tlen
        else:
            raise DataError(f"{path}: section {name!r} has unknown kind {kind}")
    if offset != len(buf):
        raise DataError(f"{path}: {len(buf) - offset} trailing bytes after sections")
    return out
