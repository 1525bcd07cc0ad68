"""Feature cache: format, lookup modes, corruption detection, concurrency."""

import struct
import threading
import zlib

import numpy as np
import pytest

from plugrank.cache import (
    HEADER_SIZE,
    FeatureCache,
    MatrixFeatureSource,
    ModalFeatureEntry,
    build_cache,
    build_cache_from_matrix,
)
from plugrank.errors import CacheFormatError, CacheMissError, ConfigError, VersionMismatchError

VERSION = bytes(range(32))


def entries_fixture(n=20, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, dim)).astype(np.float32)
    return [ModalFeatureEntry(item_id=i * 3, feature=feats[i], encoder_version=VERSION) for i in range(n)]


class TestBuild:
    def test_roundtrip_returns_exact_entries(self, tmp_path):
        entries = entries_fixture()
        path = build_cache(entries, tmp_path / "f.cache")
        cache = FeatureCache.open(path)
        out = list(cache.entries())
        assert len(out) == len(entries)
        by_id = {e.item_id: e.feature for e in entries}
        for e in out:
            assert np.array_equal(e.feature, by_id[e.item_id])
            assert e.encoder_version == VERSION

    def test_build_twice_byte_identical(self, tmp_path):
        entries = entries_fixture()
        p1 = build_cache(entries, tmp_path / "a.cache")
        p2 = build_cache(entries, tmp_path / "b.cache")
        assert p1.read_bytes() == p2.read_bytes()

    def test_insertion_order_irrelevant(self, tmp_path):
        entries = entries_fixture()
        p1 = build_cache(entries, tmp_path / "a.cache")
        p2 = build_cache(list(reversed(entries)), tmp_path / "b.cache")
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_formula(self, tmp_path):
        n, dim = 1000, 64
        rng = np.random.default_rng(1)
        path = build_cache_from_matrix(
            np.arange(n), rng.normal(size=(n, dim)).astype(np.float32), VERSION, tmp_path / "f.cache"
        )
        expected = HEADER_SIZE + 16 * n + n * dim * 4 + 4
        assert path.stat().st_size == expected

    def test_duplicate_id_rejected(self, tmp_path):
        entries = entries_fixture()
        entries[3] = ModalFeatureEntry(entries[2].item_id, entries[3].feature, VERSION)
        with pytest.raises(ConfigError, match="duplicate"):
            build_cache(entries, tmp_path / "f.cache")

    def test_ragged_dimension_rejected(self, tmp_path):
        entries = entries_fixture()
        entries[1] = ModalFeatureEntry(1, np.zeros(3, dtype=np.float32), VERSION)
        with pytest.raises(ConfigError, match="shape"):
            build_cache(entries, tmp_path / "f.cache")

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="zero entries"):
            build_cache([], tmp_path / "f.cache")


class TestLookup:
    def test_stored_id_bitwise(self, tmp_path):
        entries = entries_fixture()
        cache = FeatureCache.open(build_cache(entries, tmp_path / "f.cache"))
        assert np.array_equal(cache.get(9), entries[3].feature)

    def test_strict_miss_names_id(self, tmp_path):
        cache = FeatureCache.open(build_cache(entries_fixture(), tmp_path / "f.cache"))
        with pytest.raises(CacheMissError, match="10"):
            cache.get(10)

    def test_lenient_miss_zero_vector_and_counter(self, tmp_path):
        cache = FeatureCache.open(build_cache(entries_fixture(), tmp_path / "f.cache"), mode="lenient")
        out = cache.get(10)
        assert not out.any()
        assert cache.miss_count == 1
        cache.get_many(np.array([10, 9, 13]))
        assert cache.miss_count == 3

    def test_get_many_shape_and_values(self, tmp_path):
        entries = entries_fixture()
        cache = FeatureCache.open(build_cache(entries, tmp_path / "f.cache"))
        ids = np.array([[0, 3], [6, 9]])
        out = cache.get_many(ids)
        assert out.shape == (2, 2, 8)
        assert np.array_equal(out[1, 1], entries[3].feature)

    def test_concurrent_readers_identical(self, tmp_path):
        entries = entries_fixture(n=200)
        cache = FeatureCache.open(build_cache(entries, tmp_path / "f.cache"))
        ids = np.array([e.item_id for e in entries])
        expected = cache.get_many(ids)
        results = [None] * 8
        def reader(k):
            results[k] = cache.get_many(ids)
        threads = [threading.Thread(target=reader, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for r in results:
            assert np.array_equal(r, expected)


class TestCorruption:
    def test_crc_catches_any_single_byte_flip(self, tmp_path):
        path = build_cache(entries_fixture(), tmp_path / "f.cache")
        raw = bytearray(path.read_bytes())
        rng = np.random.default_rng(5)
        positions = rng.choice(len(raw), size=24, replace=False)
        for pos in positions:
            corrupted = bytearray(raw)
            corrupted[pos] ^= 0x5A
            (tmp_path / "bad.cache").write_bytes(bytes(corrupted))
            with pytest.raises(CacheFormatError):
                FeatureCache.open(tmp_path / "bad.cache")

    def test_truncation_detected(self, tmp_path):
        path = build_cache(entries_fixture(), tmp_path / "f.cache")
        raw = path.read_bytes()
        (tmp_path / "short.cache").write_bytes(raw[:-10])
        with pytest.raises(CacheFormatError):
            FeatureCache.open(tmp_path / "short.cache")

    def test_bad_magic_detected(self, tmp_path):
        path = build_cache(entries_fixture(), tmp_path / "f.cache")
        raw = bytearray(path.read_bytes())
        raw[:7] = b"NOTMAGI"
        # refresh the crc so only the magic is wrong
        raw[-4:] = struct.pack("<I", zlib.crc32(bytes(raw[:-4])) & 0xFFFFFFFF)
        (tmp_path / "bad.cache").write_bytes(bytes(raw))
        with pytest.raises(CacheFormatError, match="magic"):
            FeatureCache.open(tmp_path / "bad.cache")


class TestVerifyAgainstEncoders:
    def _setup(self, tmp_path):
        from plugrank.data import GenConfig, generate
        from plugrank.encoders import EncoderTrainConfig, encoder_version, export_feature_matrix, train_encoders

        cfg = GenConfig(
            n_items=120, n_users=40, n_train=1500, n_test=400, n_query_pairs=300,
            n_shops=10, n_brands=10, n_categories=5,
        )
        ds = generate(cfg, seed=2)
        text_enc, vision_enc, _ = train_encoders(
            ds, EncoderTrainConfig(qm_epochs=0, ep_epochs=0), seed=0
        )
        matrix, version = export_feature_matrix(ds.catalog, text_enc, vision_enc)
        path = build_cache_from_matrix(np.arange(len(ds.catalog)), matrix, version, tmp_path / "f.cache")
        return ds, text_enc, vision_enc, path

    def test_fresh_cache_zero_deviation(self, tmp_path):
        from plugrank.cache import verify_against_encoders

        ds, text_enc, vision_enc, path = self._setup(tmp_path)
        cache = FeatureCache.open(path)
        assert verify_against_encoders(cache, ds.catalog, text_enc, vision_enc) == 0.0

    def test_version_mismatch_rejected(self, tmp_path):
        from plugrank.cache import verify_against_encoders
        from plugrank.encoders import TextEncoder

        ds, text_enc, vision_enc, path = self._setup(tmp_path)
        cache = FeatureCache.open(path)
        other = TextEncoder(ds.config.vocab_size, text_enc.dim, seed=99)
        other.freeze()
        with pytest.raises(VersionMismatchError):
            verify_against_encoders(cache, ds.catalog, other, vision_enc)


class TestMatrixSource:
    def test_matches_matrix(self):
        m = np.arange(12, dtype=np.float32).reshape(4, 3)
        src = MatrixFeatureSource(m)
        assert np.array_equal(src.get_many(np.array([2, 0])), m[[2, 0]])

    def test_out_of_range_raises(self):
        src = MatrixFeatureSource(np.zeros((4, 3), dtype=np.float32))
        with pytest.raises(CacheMissError):
            src.get_many(np.array([5]))
