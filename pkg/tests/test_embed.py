import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrocap.crops import Region
from retrocap.embed import (
    EmbeddingStore,
    MockEmbedder,
    mock_embed,
    normalize,
    read_store,
    write_store,
)
from retrocap.errors import (
    DataError,
    StoreInconsistentError,
    StoreMagicError,
    StoreTruncatedError,
)


def roundtrip(store):
    buf = io.BytesIO()
    write_store(store, buf)
    buf.seek(0)
    return read_store(buf), buf.getvalue()


def random_store(n, dim, seed=0):
    g = np.random.default_rng(seed)
    vecs = g.standard_normal((n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return EmbeddingStore(dim=dim, ids=np.arange(n, dtype=np.uint64) * 3 + 1,
                          vectors=vecs.astype(np.float32))


class TestNormalize:
    def test_three_four_five(self):
        assert np.allclose(normalize([3.0, 4.0]), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.allclose(normalize(v), v)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=32))
    def test_unit_norm_property(self, values):
        v = np.array(values)
        if np.linalg.norm(v) == 0:
            return
        n = np.linalg.norm(normalize(v).astype(np.float64))
        assert abs(n - 1.0) <= 1e-5

    def test_zero_vector_rejected(self):
        with pytest.raises(DataError, match="degenerate"):
            normalize([0.0, 0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            normalize([1.0, np.nan])


class TestMockEmbed:
    def test_deterministic(self):
        a = mock_embed(b"payload", 64, 7)
        b = mock_embed(b"payload", 64, 7)
        assert np.array_equal(a, b)

    def test_dim_one_is_sign(self):
        for payload in (b"a", b"b", b"c"):
            v = mock_embed(payload, 1, 0)
            assert v.shape == (1,)
            assert abs(abs(float(v[0])) - 1.0) < 1e-6

    def test_different_seeds_nearly_orthogonal(self):
        # Monte-Carlo: cosine < 0.5 at d=64 in >= 99% of 1000 trials
        hits = 0
        for i in range(1000):
            payload = f"p{i}".encode()
            a = mock_embed(payload, 64, 1).astype(np.float64)
            b = mock_embed(payload, 64, 2).astype(np.float64)
            if abs(float(a @ b)) < 0.5:
                hits += 1
        assert hits >= 990

    def test_dim_validated(self):
        with pytest.raises(ValueError):
            mock_embed(b"x", 0, 0)


class TestStoreFormat:
    def test_empty_store_is_header_only(self):
        store = EmbeddingStore(dim=64, ids=np.array([], dtype=np.uint64),
                               vectors=np.zeros((0, 64), dtype=np.float32))
        buf = io.BytesIO()
        write_store(store, buf)
        raw = buf.getvalue()
        assert len(raw) == 20
        assert raw[:4] == b"XEMB"

    def test_size_fixture_count3_dim4(self):
        store = random_store(3, 4)
        _, raw = roundtrip(store)
        assert len(raw) == 20 + 3 * (8 + 16) == 92

    def test_roundtrip_bit_exact(self):
        store = random_store(17, 64, seed=3)
        back, _ = roundtrip(store)
        assert back == store

    def test_bad_magic(self):
        _, raw = roundtrip(random_store(2, 4))
        with pytest.raises(StoreMagicError):
            read_store(io.BytesIO(b"NOPE" + raw[4:]))

    def test_truncated_header(self):
        with pytest.raises(StoreTruncatedError):
            read_store(io.BytesIO(b"XEMB\x01"))

    def test_truncated_payload(self):
        _, raw = roundtrip(random_store(3, 4))
        with pytest.raises(StoreTruncatedError):
            read_store(io.BytesIO(raw[:-5]))

    def test_trailing_bytes(self):
        _, raw = roundtrip(random_store(3, 4))
        with pytest.raises(StoreInconsistentError):
            read_store(io.BytesIO(raw + b"\x00"))

    def test_bad_version(self):
        _, raw = roundtrip(random_store(1, 4))
        bad = raw[:4] + struct.pack("<I", 9) + raw[8:]
        with pytest.raises(StoreInconsistentError):
            read_store(io.BytesIO(bad))

    def test_non_unit_vector_rejected_on_read(self):
        store = random_store(2, 4)
        buf = io.BytesIO()
        write_store(store, buf)
        raw = bytearray(buf.getvalue())
        # corrupt one float in the first vector
        raw[20 + 8 : 20 + 12] = struct.pack("<f", 5.0)
        with pytest.raises(StoreInconsistentError, match="unit-norm"):
            read_store(io.BytesIO(bytes(raw)))

    def test_duplicate_ids_rejected(self):
        v = np.eye(2, 4, dtype=np.float32)
        with pytest.raises(DataError, match="unique"):
            EmbeddingStore(dim=4, ids=np.array([1, 1], dtype=np.uint64), vectors=v)


def test_mock_embedder_region_and_text_distinct():
    e = MockEmbedder(dim=32, seed=5)
    r = Region(0, 0, 10, 10)
    a = e.embed_region(b"img", r)
    b = e.embed_text("img")
    assert abs(float(a.astype(np.float64) @ b.astype(np.float64))) < 0.9
    assert np.array_equal(a, e.embed_region(b"img", r))
