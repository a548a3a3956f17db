"""Single-file named-tensor archive.

Layout::

    b"IAPCKPT\\0" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest lists ``{name, shape, element_width, offset, nbytes}`` per
tensor plus the payload length and its CRC-32; the payload is one contiguous
run of little-endian float32 values.  Encoding is canonical (sorted JSON
keys, entries in insertion order), so save -> load -> save is byte-stable.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"IAPCKPT\0"
VERSION = 1
ELEMENT = np.dtype("<f4")
_HEADER = struct.Struct("<IQ")


def as_float32(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.array(value, dtype=ELEMENT, order="C")  # keeps 0-d shapes, unlike ascontiguousarray


def encode(tensors: Mapping[str, object], metadata: dict | None = None) -> tuple[bytes, dict]:
    """Serialize ``tensors`` (name -> array-like) to archive bytes; returns (bytes, manifest)."""
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = as_float32(value)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "element_width": ELEMENT.itemsize,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"version": VERSION, "entries": entries, "payload_bytes": len(payload),
                "payload_crc32": zlib.crc32(payload), "metadata": metadata or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _HEADER.pack(VERSION, len(head)) + head + payload, manifest


def _validate(manifest: dict, payload: bytes) -> None:
    if manifest.get("payload_bytes") != len(payload):
        raise FormatError(f"payload is {len(payload)} bytes, manifest declares {manifest.get('payload_bytes')}")
    cursor = 0
    for e in manifest["entries"]:
        if e["element_width"] != ELEMENT.itemsize:
            raise FormatError(f"{e['name']}: unsupported element width {e['element_width']}")
        expect = int(np.prod(e["shape"], dtype=np.int64)) * ELEMENT.itemsize
        if e["nbytes"] != expect:
            raise FormatError(f"{e['name']}: {e['nbytes']} bytes do not match shape {e['shape']}")
        if e["offset"] < cursor or e["offset"] + e["nbytes"] > len(payload):
            raise FormatError(f"{e['name']}: offset {e['offset']} overlaps or exceeds the payload")
        cursor = e["offset"] + e["nbytes"]
    if zlib.crc32(payload) != manifest.get("payload_crc32"):
        raise FormatError("payload checksum mismatch (archive corrupted)")


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`encode`; returns (name -> float32 array, metadata)."""
    if not blob.startswith(MAGIC):
        raise FormatError("not a checkpoint archive (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + _HEADER.size:
        raise FormatError("truncated header")
    version, mlen = _HEADER.unpack_from(blob, pos)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos += _HEADER.size
    if len(blob) < pos + mlen:
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from None
    payload = blob[pos + mlen:]
    _validate(manifest, payload)
    names = [e["name"] for e in manifest["entries"]]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in manifest")
    tensors = {}
    for e in manifest["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=ELEMENT).reshape(e["shape"]).copy()
    return tensors, manifest.get("metadata", {})


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, tensors: Mapping[str, object], metadata: dict | None = None) -> dict:
    blob, manifest = encode(tensors, metadata)
    atomic_write(path, blob)
    return manifest


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
