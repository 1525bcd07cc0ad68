"""Immutable per-item modal feature store.

One cache file holds the frozen-encoder feature of every catalog item for a
single encoder version. File layout (little-endian)::

    magic            "PPMCACH" (7 bytes)
    version          u16
    dim              u32      feature vector length
    count            u64      number of entries
    encoder_version  32 bytes
    index            count x (item_id u64, offset u64), sorted by item_id
    data             count x dim float32 vectors, in index order
    crc32            u32 over every preceding byte

Offsets are absolute byte positions of each vector. Keys are sorted, so
lookups are binary searches and building twice from the same entries yields
byte-identical files. After build the file never changes; readers share the
loaded buffer freely across threads.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CacheFormatError, CacheMissError, ConfigError, VersionMismatchError

MAGIC = b"PPMCACH"
FORMAT_VERSION = 1
HEADER_SIZE = 7 + 2 + 4 + 8 + 32


@dataclass
class ModalFeatureEntry:
    """Fixed-length content feature of one item under one encoder version."""

    item_id: int
    feature: np.ndarray
    encoder_version: bytes


def build_cache(entries, path) -> Path:
    """Write a cache file from entries; rejects duplicates and ragged dims."""
    entries = list(entries)
    if not entries:
        raise ConfigError("cannot build a cache from zero entries")
    dim = entries[0].feature.shape[-1]
    version = entries[0].encoder_version
    if len(version) != 32:
        raise ConfigError("encoder_version must be 32 bytes")
    ids = np.array([e.item_id for e in entries], dtype=np.uint64)
    if np.unique(ids).size != ids.size:
        seen = set()
        first_dup = next(i for i in ids.tolist() if i in seen or seen.add(i))
        raise ConfigError(f"duplicate item_id {int(first_dup)} in cache entries")
    matrix = np.empty((len(entries), dim), dtype=np.float32)
    for row, e in enumerate(entries):
        if e.feature.shape != (dim,):
            raise ConfigError(
                f"entry {e.item_id}: feature shape {e.feature.shape} != ({dim},)"
            )
        if e.encoder_version != version:
            raise VersionMismatchError(f"entry {e.item_id}: mixed encoder versions")
        matrix[row] = e.feature
    order = np.argsort(ids, kind="stable")
    return build_cache_from_matrix(ids[order], matrix[order], version, path, _presorted=True)


def build_cache_from_matrix(item_ids, matrix, encoder_version, path, _presorted=False) -> Path:
    """Write a cache from an [n, dim] feature matrix keyed by item_ids."""
    item_ids = np.asarray(item_ids, dtype=np.uint64)
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if item_ids.ndim != 1 or matrix.ndim != 2 or item_ids.size != matrix.shape[0]:
        raise ConfigError("item_ids and matrix rows must align")
    if item_ids.size == 0:
        raise ConfigError("cannot build a cache from zero entries")
    if np.unique(item_ids).size != item_ids.size:
        raise ConfigError("duplicate item_id in cache entries")
    if not _presorted:
        order = np.argsort(item_ids, kind="stable")
        item_ids = item_ids[order]
        matrix = matrix[order]
    count, dim = matrix.shape

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<H", FORMAT_VERSION)
    buf += struct.pack("<I", dim)
    buf += struct.pack("<Q", count)
    buf += bytes(encoder_version)
    data_start = HEADER_SIZE + 16 * count
    offsets = data_start + 4 * dim * np.arange(count, dtype=np.uint64)
    index = np.empty((count, 2), dtype="<u8")
    index[:, 0] = item_ids
    index[:, 1] = offsets
    buf += index.tobytes(order="C")
    buf += matrix.astype("<f4").tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    return path


class FeatureCache:
    """Read-only view of a cache file.

    ``mode='strict'`` raises on a missing id; ``mode='lenient'`` returns a
    zero vector and counts the miss. Lookups are binary searches over the
    sorted key index; the backing buffer is immutable, so any number of
    threads may read concurrently.
    """

    def __init__(self, path, item_ids, matrix, encoder_version, mode="strict"):
        if mode not in ("strict", "lenient"):
            raise ConfigError(f"unknown cache mode {mode!r}")
        self.path = Path(path)
        self.item_ids = item_ids
        self.matrix = matrix
        self.encoder_version = encoder_version
        self.mode = mode
        self.miss_count = 0
        self._zero = np.zeros(matrix.shape[1], dtype=np.float32)

    @classmethod
    def open(cls, path, mode="strict") -> "FeatureCache":
        raw = Path(path).read_bytes()
        if len(raw) < HEADER_SIZE + 4:
            raise CacheFormatError(f"{path}: too short to be a feature cache")
        stored_crc = struct.unpack("<I", raw[-4:])[0]
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
            raise CacheFormatError(f"{path}: CRC mismatch, file corrupted")
        if raw[:7] != MAGIC:
            raise CacheFormatError(f"{path}: bad magic {raw[:7]!r}")
        version, dim = struct.unpack_from("<HI", raw, 7)
        (count,) = struct.unpack_from("<Q", raw, 13)
        if version != FORMAT_VERSION:
            raise CacheFormatError(f"{path}: unsupported cache version {version}")
        encoder_version = raw[21:53]
        expected = HEADER_SIZE + 16 * count + 4 * dim * count + 4
        if len(raw) != expected:
            raise CacheFormatError(f"{path}: size {len(raw)} != expected {expected}")
        index = np.frombuffer(raw, dtype="<u8", count=2 * count, offset=HEADER_SIZE).reshape(count, 2)
        item_ids = index[:, 0].copy()
        if count > 1 and (np.diff(item_ids.astype(np.int64)) <= 0).any():
            raise CacheFormatError(f"{path}: index keys are not strictly increasing")
        data_start = HEADER_SIZE + 16 * count
        expected_offsets = data_start + 4 * dim * np.arange(count, dtype=np.uint64)
        if not np.array_equal(index[:, 1], expected_offsets):
            raise CacheFormatError(f"{path}: index offsets inconsistent with layout")
        matrix = (
            np.frombuffer(raw, dtype="<f4", count=count * dim, offset=data_start)
            .reshape(count, dim)
            .copy()
        )
        return cls(path, item_ids, matrix, encoder_version, mode=mode)

    def __len__(self):
        return self.item_ids.size

    @property
    def dim(self):
        return self.matrix.shape[1]

    def _rows(self, ids):
        ids = np.asarray(ids, dtype=np.uint64)
        rows = np.searchsorted(self.item_ids, ids)
        rows_clipped = np.minimum(rows, self.item_ids.size - 1)
        hit = self.item_ids[rows_clipped] == ids
        return rows_clipped, hit

    def get(self, item_id) -> np.ndarray:
        rows, hit = self._rows(np.array([item_id]))
        if not hit[0]:
            if self.mode == "strict":
                raise CacheMissError(f"item {int(item_id)} not in cache {self.path.name}")
            self.miss_count += 1
            return self._zero.copy()
        return self.matrix[rows[0]].copy()

    def get_many(self, item_ids) -> np.ndarray:
        """Vectorized lookup; shape [..., dim]. Misses follow the cache mode."""
        item_ids = np.asarray(item_ids)
        rows, hit = self._rows(item_ids.reshape(-1))
        if not hit.all():
            missing = item_ids.reshape(-1)[~hit]
            if self.mode == "strict":
                raise CacheMissError(f"item {int(missing[0])} not in cache {self.path.name}")
            self.miss_count += int((~hit).sum())
        out = self.matrix[rows]
        if not hit.all():
            out = out.copy()
            out[~hit] = 0.0
        return out.reshape(item_ids.shape + (self.dim,))

    def entries(self):
        for i in range(len(self)):
            yield ModalFeatureEntry(
                item_id=int(self.item_ids[i]),
                feature=self.matrix[i].copy(),
                encoder_version=self.encoder_version,
            )


class MatrixFeatureSource:
    """In-memory feature lookup keyed by contiguous item id (strict only)."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float32)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def get_many(self, item_ids):
        item_ids = np.asarray(item_ids)
        flat = item_ids.reshape(-1)
        bad = (flat < 0) | (flat >= self.matrix.shape[0])
        if bad.any():
            raise CacheMissError(f"item {int(flat[bad][0])} not in feature matrix")
        return self.matrix[flat].reshape(item_ids.shape + (self.dim,))


def verify_against_encoders(cache: FeatureCache, catalog, text_enc, vision_enc) -> float:
    """Recompute every feature with the frozen encoders; max absolute deviation."""
    from .encoders import encoder_version, export_feature_matrix

    current = encoder_version(text_enc, vision_enc)
    if current != cache.encoder_version:
        raise VersionMismatchError(
            f"cache built for encoder version {cache.encoder_version.hex()[:12]}, "
            f"current encoders are {current.hex()[:12]}"
        )
    fresh, _ = export_feature_matrix(catalog, text_enc, vision_enc)
    stored = cache.get_many(np.arange(len(catalog)))
    return float(np.abs(fresh - stored).max())
