"""Binary checkpoint container.

Layout: magic ``RACK``, u32 format version, u64 header length, UTF-8 JSON
header, then the payload of concatenated little-endian float32 tensors in
manifest order. All integers are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"RACK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DigestError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str  # rac | teacher | latent
    tensors: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)
    teacher_digest: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    def manifest(self) -> list[dict[str, Any]]:
        entries, offset = [], 0
        for name, arr in self.tensors.items():
            nbytes = int(arr.size) * 4
            entries.append({
                "name": name,
                "group": name.split(".", 1)[0],
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
            })
            offset += nbytes
        return entries

    def groups(self) -> list[str]:
        seen: list[str] = []
        for entry in self.manifest():
            if entry["group"] not in seen:
                seen.append(entry["group"])
        return seen


def to_bytes(ckpt: Checkpoint) -> bytes:
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE32).tobytes() for a in ckpt.tensors.values())
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "manifest": ckpt.manifest(),
        "teacher_digest": ckpt.teacher_digest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise TruncatedError("checkpoint shorter than its fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedError("checkpoint header truncated")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    payload = raw[start + header_len:]
    manifest = header["manifest"]
    expected = sum(e["nbytes"] for e in manifest)
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise FormatError(f"payload has {len(payload) - expected} trailing bytes")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise DigestError("payload digest mismatch: checkpoint is corrupt")
    tensors = {}
    offset = 0
    for e in manifest:
        if e["offset"] != offset:
            raise FormatError(f"manifest offset gap at {e['name']!r}")
        arr = np.frombuffer(payload, dtype=_LE32, count=e["nbytes"] // 4, offset=offset)
        tensors[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
        offset += e["nbytes"]
    return Checkpoint(header["kind"], tensors, header["config"], header["teacher_digest"],
                      header["meta"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically; a failed write leaves no partial file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def save_tensor(path: str | Path, name: str, array: np.ndarray, **meta) -> None:
    save_checkpoint(path, Checkpoint("latent", {name: np.asarray(array, np.float32)}, meta=meta))


def load_tensor(path: str | Path) -> np.ndarray:
    ckpt = load_checkpoint(path)
    if len(ckpt.tensors) != 1:
        raise FormatError(f"expected a single-tensor container, found {len(ckpt.tensors)} tensors")
    return next(iter(ckpt.tensors.values()))
