"""Binary artifact container: encoder checkpoints, embedding stores, scorers.

Layout: 7-byte magic ``EHRSEQ1``, u32 little-endian header length, UTF-8 JSON
header, then one length-prefixed blob per array in header order. Arrays are
float32 little-endian, so save -> load round-trips float32 data bitwise.

Header shape::

    {"format_version": 1, "kind": "encoder" | ...,
     "meta": {...caller metadata...},
     "arrays": [{"name": str, "shape": [int, ...]}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EHRSEQ1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated, or mismatched artifact file."""


def save_artifact(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_artifact(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an artifact; raises :class:`ContainerError` on any malformation."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read artifact {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise ContainerError(f"not an artifact file (bad magic): {path}")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise ContainerError(f"truncated artifact header: {path}")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable artifact header: {path}: {exc}") from exc
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"unsupported format version {header.get('format_version')} (expected {FORMAT_VERSION})"
        )
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"artifact kind {header.get('kind')!r}, expected {kind!r}")
    arrays: dict[str, np.ndarray] = {}
    for spec in header.get("arrays", []):
        if pos + 4 > len(data):
            raise ContainerError(f"truncated artifact (missing blob length for {spec['name']!r})")
        (nbytes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = tuple(spec["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != expected:
            raise ContainerError(
                f"blob size {nbytes} for array {spec['name']!r} does not match shape {shape}"
            )
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated artifact (array {spec['name']!r})")
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f4").reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float32, copy=True)  # writable copy
        pos += nbytes
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after declared arrays: {path}")
    return header["meta"], arrays


def artifact_hash(path: str | Path) -> str:
    """sha256 of the artifact file bytes; identifies a model in logs/responses."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
