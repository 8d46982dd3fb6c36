"""Flat binary snapshots indexed by a plain-text manifest.

A snapshot ``<stem>`` is two files:

``<stem>.manifest``
    ``pcotta-blob 1`` header, then ``meta <key> <value>`` lines and one
    ``tensor <name> <shape> <offset> <nbytes>`` line per array.  Shapes are
    comma-separated (``-`` for a scalar).
``<stem>.bin``
    The arrays as little-endian float32, concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

MAGIC = "pcotta-blob 1"
_LE32 = np.dtype("<f4")


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def write_blob(stem, arrays: dict[str, np.ndarray], meta: dict[str, object] | None = None) -> Path:
    """Write ``arrays`` (in insertion order) and ``meta``; return the manifest path."""
    manifest, blob = _paths(stem)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, f"blob {blob.name}"]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise ConfigError(f"meta key may not contain whitespace: {key!r}")
        lines.append(f"meta {key} {value}")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ConfigError(f"tensor name may not contain whitespace: {name!r}")
        data = np.ascontiguousarray(arr, dtype=_LE32)
        shape = ",".join(str(s) for s in data.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset} {data.nbytes}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob.write_bytes(b"".join(chunks))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_blob(stem) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`write_blob`; validates offsets against the blob length."""
    manifest, blob = _paths(stem)
    if not manifest.exists():
        raise ConfigError(f"missing manifest {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ParseError(f"{manifest}: line 1: expected {MAGIC!r}")
    meta: dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "blob":
            blob = manifest.with_name(rest.strip())
        elif kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split()
            if len(parts) != 4:
                raise ParseError(f"{manifest}: line {lineno}: malformed tensor entry")
            name, shape, offset, nbytes = parts
            shape_t = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            entries.append((name, shape_t, int(offset), int(nbytes)))
        else:
            raise ParseError(f"{manifest}: line {lineno}: unknown record {kind!r}")
    raw = blob.read_bytes()
    expected = sum(e[3] for e in entries)
    if len(raw) != expected:
        raise ParseError(f"{blob}: blob length {len(raw)} does not match manifest total {expected}")
    arrays = {}
    for name, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if count * _LE32.itemsize != nbytes or offset + nbytes > len(raw):
            raise ParseError(f"{blob}: entry {name!r} is inconsistent with its shape {shape}")
        arr = np.frombuffer(raw, dtype=_LE32, count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return arrays, meta


def checksum(arrays) -> str:
    """SHA-256 over names and float32 bytes, order-independent by name."""
    if not isinstance(arrays, dict):
        arrays = {str(i): a for i, a in enumerate(arrays)}
    h = hashlib.sha256()
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_LE32)
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()
