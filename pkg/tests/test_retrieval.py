import numpy as np
import pytest

from retrocap import kernels
from retrocap.crops import Granularity
from retrocap.embed import EmbeddingStore, MockEmbedder, normalize
from retrocap.errors import DataError
from retrocap.retrieval import RetrievalHit, batch_retrieve, cosine_topk


def naive_topk(store, query, k):
    """Full-sort oracle: score every key, sort by (score desc, id asc)."""
    scores = store.vectors.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((store.ids, -scores))[: min(k, len(store))]
    return [
        RetrievalHit(int(store.ids[r]), float(scores[r]), i)
        for i, r in enumerate(order)
    ]


def random_store(n, dim, seed, shuffle_ids=True):
    g = np.random.default_rng(seed)
    vecs = g.standard_normal((n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ids = np.arange(n, dtype=np.uint64)
    if shuffle_ids:
        g.shuffle(ids)
    return EmbeddingStore(dim=dim, ids=ids, vectors=vecs.astype(np.float32))


def random_query(dim, seed):
    g = np.random.default_rng(seed)
    return normalize(g.standard_normal(dim))


class TestCosineTopk:
    def test_self_match_ranks_first(self):
        store = random_store(50, 16, seed=1)
        hits = cosine_topk(store.vectors[7].astype(np.float64), store, 3)
        assert hits[0].description_id == int(store.ids[7])
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)
        assert [h.rank for h in hits] == [0, 1, 2]

    def test_orthogonal_pair(self):
        store = EmbeddingStore(
            dim=2,
            ids=np.array([10, 20], dtype=np.uint64),
            vectors=np.array([[1, 0], [0, 1]], dtype=np.float32),
        )
        hits = cosine_topk(np.array([1.0, 0.0]), store, 2)
        assert [(h.description_id, round(h.score, 9)) for h in hits] == [
            (10, 1.0), (20, 0.0),
        ]

    def test_matches_oracle_on_random_stores(self):
        for seed in range(5):
            store = random_store(2000, 64, seed)
            q = random_query(64, seed + 100)
            for k in (1, 12, 50):
                got = cosine_topk(q, store, k)
                want = naive_topk(store, q, k)
                assert [(h.description_id, h.rank) for h in got] == [
                    (h.description_id, h.rank) for h in want
                ]
                assert max(
                    abs(a.score - b.score) for a, b in zip(got, want)
                ) < 1e-12

    def test_tie_break_by_ascending_id(self):
        vecs = np.tile(np.float32([1, 0, 0, 0]), (6, 1))
        store = EmbeddingStore(
            dim=4, ids=np.array([9, 3, 7, 1, 5, 2], dtype=np.uint64), vectors=vecs
        )
        hits = cosine_topk(np.array([1.0, 0, 0, 0]), store, 4)
        assert [h.description_id for h in hits] == [1, 2, 3, 5]

    def test_scale_invariance_of_ranking(self):
        g = np.random.default_rng(0)
        store = random_store(500, 32, seed=9)
        raw = g.standard_normal(32)
        base = cosine_topk(normalize(raw), store, 10)
        for c in (1e-6, 0.5, 3.0, 1e6):
            got = cosine_topk(normalize(c * raw), store, 10)
            assert [h.description_id for h in got] == [h.description_id for h in base]

    def test_monotone_k_prefix(self):
        store = random_store(300, 16, seed=4)
        q = random_query(16, 5)
        prev = []
        for k in range(1, 20):
            hits = [h.description_id for h in cosine_topk(q, store, k)]
            assert hits[: len(prev)] == prev
            prev = hits

    def test_empty_store_rejected(self):
        store = EmbeddingStore(dim=4, ids=np.array([], dtype=np.uint64),
                               vectors=np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(DataError, match="empty"):
            cosine_topk(np.array([1.0, 0, 0, 0]), store, 1)

    def test_non_normalized_query_rejected(self):
        store = random_store(5, 4, seed=0)
        with pytest.raises(DataError, match="unit-norm"):
            cosine_topk(np.array([2.0, 0, 0, 0]), store, 1)

    def test_k_below_one_rejected(self):
        store = random_store(5, 4, seed=0)
        with pytest.raises(ValueError):
            cosine_topk(random_query(4, 0), store, 0)

    def test_k_clamps_with_warning(self):
        store = random_store(3, 4, seed=0)
        with pytest.warns(UserWarning, match="clamping"):
            hits = cosine_topk(random_query(4, 1), store, 10)
        assert len(hits) == 3

    def test_dim_mismatch_rejected(self):
        store = random_store(5, 4, seed=0)
        with pytest.raises(DataError, match="dim"):
            cosine_topk(random_query(8, 0), store, 1)


class TestBackends:
    def test_backends_agree_exactly(self):
        if not kernels.HAS_NUMBA:
            pytest.skip("numba unavailable")
        for seed in range(3):
            store = random_store(3000, 64, seed)
            q = np.asarray(random_query(64, seed), dtype=np.float64)
            for k in (1, 7, 64):
                rn, sn = kernels.topk_numba(store.vectors, store.ids, q, k)
                rp, sp = kernels.topk_numpy(store.vectors, store.ids, q, k)
                assert np.array_equal(rn, rp)
                assert np.max(np.abs(sn - sp)) < 1e-12

    def test_env_flag_selects_backend(self, monkeypatch):
        monkeypatch.setenv("RETROCAP_BACKEND", "numpy")
        kernels._reset_backend()
        assert kernels.active_backend() == "numpy"
        monkeypatch.setenv("RETROCAP_BACKEND", "nonsense")
        kernels._reset_backend()
        with pytest.raises(ValueError):
            kernels.active_backend()
        monkeypatch.delenv("RETROCAP_BACKEND")
        kernels._reset_backend()
        assert kernels.active_backend() in ("numba", "numpy")

    def teardown_method(self):
        kernels._reset_backend()


class TestBatchRetrieve:
    def test_shape_k12_gives_15_crops_180_hits(self):
        store = random_store(400, 32, seed=2)
        embedder = MockEmbedder(dim=32, seed=0)
        rset = batch_retrieve(b"image-bytes", 96, 96, embedder, store, 12)
        assert len(rset.per_crop) == 15
        assert rset.total_hits() == 180
        counts = {g: 0 for g in Granularity}
        for crop in rset.per_crop:
            counts[crop.granularity] += 1
        assert counts == {Granularity.ORIGINAL: 1, Granularity.FIVE: 5,
                          Granularity.NINE: 9}

    def test_single_description_store(self):
        vec = normalize(np.arange(1.0, 9.0))
        store = EmbeddingStore(dim=8, ids=np.array([42], dtype=np.uint64),
                               vectors=vec[None, :])
        embedder = MockEmbedder(dim=8, seed=1)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rset = batch_retrieve(b"img", 50, 50, embedder, store, 1)
        assert all(
            hits[0].description_id == 42 for hits in rset.per_crop.values()
        )

    def test_deterministic(self):
        store = random_store(100, 16, seed=8)
        embedder = MockEmbedder(dim=16, seed=3)
        a = batch_retrieve(b"payload", 64, 48, embedder, store, 5)
        b = batch_retrieve(b"payload", 64, 48, embedder, store, 5)
        assert a.to_json_dict() == b.to_json_dict()
