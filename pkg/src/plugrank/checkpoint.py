"""Versioned named-tensor checkpoint files.

Layout (all integers little-endian)::

    magic (7 bytes)   "PPMCKPT" | "URMCKPT" | "ENCCKPT"
    version           u16
    tensor count      u32
    per tensor:
        name length   u16, then UTF-8 name
        rank          u8
        dims          u32 each
        values        raw IEEE-754 float32
    crc32             u32 over every preceding byte

Tensors are written sorted by name, so identical contents produce identical
bytes. Metadata (config hash, training-window id, step count, parent
checkpoint hashes) rides along as a reserved ``__metadata__`` tensor holding
the UTF-8 JSON bytes as float32 values; loaders strip it back out.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
METADATA_KEY = "__metadata__"
_MAGICS = {"PPM": b"PPMCKPT", "URM": b"URMCKPT", "ENC": b"ENCCKPT"}
_KINDS = {v: k for k, v in _MAGICS.items()}


class Checkpoint:
    """In-memory named-tensor bundle with save/load and name/shape checks."""

    def __init__(self, kind, tensors, metadata=None, format_version=FORMAT_VERSION):
        if kind not in _MAGICS:
            raise CheckpointError(f"unknown checkpoint kind {kind!r}")
        self.kind = kind
        self.format_version = format_version
        self.tensors = {name: np.asarray(t, dtype=np.float32) for name, t in tensors.items()}
        self.metadata = dict(metadata or {})

    @classmethod
    def from_paramset(cls, kind, pset, metadata=None):
        return cls(kind, {p.name: p.tensor.data for p in pset}, metadata)

    def names(self):
        return sorted(self.tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = dict(self.tensors)
        meta_bytes = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        entries[METADATA_KEY] = np.frombuffer(meta_bytes, dtype=np.uint8).astype(np.float32)

        buf = bytearray()
        buf += _MAGICS[self.kind]
        buf += struct.pack("<H", self.format_version)
        buf += struct.pack("<I", len(entries))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype=np.float32)
            name_b = name.encode("utf-8")
            buf += struct.pack("<H", len(name_b))
            buf += name_b
            buf += struct.pack("<B", arr.ndim)
            for dim in arr.shape:
                buf += struct.pack("<I", dim)
            buf += arr.tobytes(order="C")
        buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
        path.write_bytes(bytes(buf))
        return path

    @classmethod
    def load(cls, path, kind=None) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < 17:
            raise CheckpointError(f"{path}: file too short to be a checkpoint")
        stored_crc = struct.unpack("<I", raw[-4:])[0]
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
            raise CheckpointError(f"{path}: CRC mismatch, file corrupted")
        magic = raw[:7]
        if magic not in _KINDS:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        found_kind = _KINDS[magic]
        if kind is not None and found_kind != kind:
            raise CheckpointError(f"{path}: expected {kind} checkpoint, found {found_kind}")
        off = 7
        version, count = struct.unpack_from("<HI", raw, off)
        off += 6
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
            off += 4 * rank
            n_values = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n_values, offset=off).reshape(dims)
            off += 4 * n_values
            tensors[name] = arr.copy()
        if off != len(raw) - 4:
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
        metadata = {}
        meta_arr = tensors.pop(METADATA_KEY, None)
        if meta_arr is not None:
            metadata = json.loads(meta_arr.astype(np.uint8).tobytes().decode("utf-8"))
        return cls(found_kind, tensors, metadata, format_version=version)

    def load_into_parameter(self, param):
        if param.name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor named {param.name!r}")
        value = self.tensors[param.name]
        if value.shape != param.tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {param.name!r}: checkpoint {value.shape}, model {param.tensor.data.shape}"
            )
        param.tensor.data = value.astype(param.tensor.data.dtype).copy()

    def load_into(self, params):
        """Load every given parameter by name; report all mismatches at once."""
        params = list(params)
        problems = []
        for p in params:
            if p.name not in self.tensors:
                problems.append(f"missing:{p.name}")
            elif self.tensors[p.name].shape != p.tensor.data.shape:
                problems.append(
                    f"shape:{p.name} {self.tensors[p.name].shape} != {p.tensor.data.shape}"
                )
        if problems:
            raise CheckpointError("checkpoint/model mismatch: " + ", ".join(problems))
        for p in params:
            self.load_into_parameter(p)


def file_hash(path) -> str:
    """Hex sha256 of a file, used for checkpoint provenance chains."""
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
