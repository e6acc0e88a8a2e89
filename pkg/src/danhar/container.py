"""Binary container shared by model checkpoints and windowed-data archives.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then raw little-endian array blobs in manifest order. The header
carries ``manifest``: a list of ``[name, shape, dtype, byte_offset]`` with
offsets relative to the start of the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class ContainerError(ValueError):
    """Malformed, truncated or inconsistent container file."""


class ManifestMismatchError(ContainerError):
    """Manifest names or shapes disagree with what the reader expects."""


def _dumps(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path: str | Path, magic: bytes, header: Mapping[str, Any], arrays: Mapping[str, tuple[np.ndarray, str]]) -> None:
    """Write ``arrays`` (name -> (array, dtype name)) in insertion order."""
    assert len(magic) == 8
    manifest = []
    blobs = []
    offset = 0
    for name, (arr, dtype) in arrays.items():
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported storage dtype {dtype!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append([name, list(np.shape(arr)), dtype, offset])
        blobs.append(raw)
        offset += len(raw)
    full = dict(header)
    full["format_version"] = FORMAT_VERSION
    full["manifest"] = manifest
    hb = _dumps(full)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_container(path: str | Path, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ContainerError(f"{path}: truncated file ({len(raw)} bytes)")
    if raw[:8] != magic:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {version!r} not supported (expected {FORMAT_VERSION})")
    body = memoryview(raw)[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in header.get("manifest", []):
        try:
            name, shape, dtype, offset = entry
            np_dtype = np.dtype(_DTYPES[dtype])
        except (ValueError, TypeError, KeyError) as exc:
            raise ManifestMismatchError(f"{path}: bad manifest entry {entry!r}") from exc
        if offset != expected_end:
            raise ManifestMismatchError(f"{path}: {name}: offset {offset} does not follow previous blob ({expected_end})")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np_dtype.itemsize
        if offset + nbytes > len(body):
            raise ContainerError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype=np_dtype).reshape(shape)
        arrays[name] = arr.astype(np_dtype.newbyteorder("="))
        expected_end = offset + nbytes
    if expected_end != len(body):
        raise ContainerError(f"{path}: {len(body) - expected_end} trailing bytes after last blob")
    return header, arrays
