import json
import struct
import threading

import numpy as np
import pytest

from oracles import topk_full_sort
from scene_rag._validation import DimensionMismatchError
from scene_rag.embedding import cosine_similarity
from scene_rag.store import (
    HEADER, MAGIC, Collection, CollectionExistsError, CollectionManifest, CollectionNotFoundError,
    DuplicateIdError, FormatError, IndexParams, IntegrityError, StoredDocument, VectorDB, load, persist,
)


def _docs(vectors, prefix="d", start=0):
    return [StoredDocument(f"{prefix}{start + i}", f"text {start + i}", {"n": start + i}, v)
            for i, v in enumerate(vectors)]


@pytest.fixture
def db(tmp_path):
    return VectorDB(tmp_path / "db")


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_create_and_count(db):
    coll = db.create_collection("kb", 4)
    assert coll.count() == 0 and db.list_collections() == ["kb"]
    assert json.loads((db.path / "kb" / "manifest").read_text())["count"] == 0


def test_create_twice_rejected(db):
    db.create_collection("kb", 4)
    with pytest.raises(CollectionExistsError):
        db.create_collection("kb", 4)


@pytest.mark.parametrize("dim", [0, -1, 2.5, True])
def test_create_bad_dim(db, dim):
    with pytest.raises(ValueError):
        db.create_collection("kb", dim)


@pytest.mark.parametrize("name", ["", "../up", "a/b", ".hidden"])
def test_bad_collection_names(db, name):
    with pytest.raises(ValueError):
        db.create_collection(name, 4)


def test_get_missing_collection(db):
    with pytest.raises(CollectionNotFoundError):
        db.get_collection("nope")


def test_add_and_get(db):
    coll = db.create_collection("kb", 3)
    assert coll.add_documents(_docs([[1, 0, 0], [0, 1, 0], [0, 0, 1]])) == 3
    assert coll.count() == 3 and coll.manifest.count == 3
    doc = coll.get("d1")
    assert doc.text == "text 1" and doc.metadata == {"n": 1} and doc.vector.tolist() == [0, 1, 0]


def test_duplicate_id_rejects_whole_batch(db):
    coll = db.create_collection("kb", 2)
    coll.add_documents(_docs([[1, 0]]))
    with pytest.raises(DuplicateIdError) as err:
        coll.add_documents(_docs([[0, 1]], start=5) + _docs([[1, 1]]))
    assert err.value.doc_id == "d0" and coll.count() == 1
    with pytest.raises(DuplicateIdError):
        coll.add_documents(_docs([[0, 1], [1, 1]], prefix="x") + _docs([[1, 1]], prefix="x"))
    assert coll.count() == 1


def test_dimension_mismatch_rejects_batch(db):
    coll = db.create_collection("kb", 2)
    with pytest.raises(DimensionMismatchError):
        coll.add_documents(_docs([[1, 0], [1, 0, 0]]))
    assert coll.count() == 0


@pytest.mark.parametrize("meta", [{"a": [1]}, {"a": {"b": 1}}, {1: "x"}, "flat"])
def test_metadata_must_be_flat(db, meta):
    coll = db.create_collection("kb", 2)
    with pytest.raises(TypeError):
        coll.add_documents([StoredDocument("a", "t", meta, [1, 0])])


def test_search_exact_self_hit(rng):
    coll = Collection(CollectionManifest("m", 8, "test"))
    vecs = rng.normal(size=(20, 8)).astype(np.float32)
    coll.add_documents(_docs(vecs))
    hits = coll.search_exact(vecs[5], k=3)
    assert hits[0].id == "d5" and hits[0].score == 1.0


def test_search_exact_k_beyond_count_and_empty(rng):
    coll = Collection(CollectionManifest("m", 4, "test"))
    assert coll.search_exact([1, 0, 0, 0]) == []
    coll.add_documents(_docs(rng.normal(size=(3, 4))))
    hits = coll.search_exact([1, 0, 0, 0], k=10)
    assert sorted(h.id for h in hits) == ["d0", "d1", "d2"]
    assert all(a.score >= b.score for a, b in zip(hits, hits[1:]))


@pytest.mark.parametrize("k", [0, -1, 1.5, True])
def test_search_bad_k(k):
    coll = Collection(CollectionManifest("m", 2, "test"))
    with pytest.raises(ValueError):
        coll.search_exact([1, 0], k=k)


def test_search_query_dim_mismatch():
    coll = Collection(CollectionManifest("m", 2, "test"))
    with pytest.raises(DimensionMismatchError):
        coll.search_exact([1, 0, 0])


def test_search_exact_matches_full_sort_with_ties(rng):
    vecs = rng.normal(size=(200, 384)).astype(np.float32)
    for dst, src in [(50, 3), (120, 3), (199, 77), (10, 9)]:
        vecs[dst] = vecs[src]
    vecs[30] = 0.0
    coll = Collection(CollectionManifest("m", 384, "test"))
    coll.add_documents(_docs(vecs))
    queries = rng.normal(size=(20, 384)).astype(np.float32)
    queries[0], queries[1] = vecs[3], vecs[77]
    for q in queries:
        got = [h.id for h in coll.search_exact(q, k=10)]
        assert got == [f"d{i}" for i in topk_full_sort(vecs.tolist(), q.tolist(), 10)]


def test_search_full_k_is_sorted_permutation(rng):
    vecs = rng.normal(size=(60, 16)).astype(np.float32)
    coll = Collection(CollectionManifest("m", 16, "test"))
    coll.add_documents(_docs(vecs))
    q = rng.normal(size=16)
    hits = coll.search_exact(q, k=60)
    assert sorted(h.id for h in hits) == sorted(coll.ids())
    assert all(a.score >= b.score for a, b in zip(hits, hits[1:]))
    for h in hits:
        assert h.score == pytest.approx(cosine_similarity(q, coll.get(h.id).vector), abs=1e-6)


def test_search_ann_single_doc():
    coll = Collection(CollectionManifest("m", 3, "test"))
    coll.add_documents(_docs([[1, 2, 3]]))
    [ann] = coll.search_ann([1, 0, 0], k=4)
    [exact] = coll.search_exact([1, 0, 0], k=4)
    assert ann == exact


def test_search_ann_deterministic_and_subset(rng):
    vecs = rng.normal(size=(500, 32)).astype(np.float32)
    coll = Collection(CollectionManifest("m", 32, "test", index_params=IndexParams(M=8, ef_construction=64, ef_search=32)))
    coll.add_documents(_docs(vecs))
    q = rng.normal(size=32)
    first = coll.search_ann(q, k=10)
    assert first == coll.search_ann(q, k=10)
    ids = set(coll.ids())
    assert all(h.id in ids for h in first)
    for h in first:
        assert h.score == pytest.approx(cosine_similarity(q, coll.get(h.id).vector), abs=1e-6)


def test_search_ann_sees_documents_added_after_build(rng):
    coll = Collection(CollectionManifest("m", 16, "test"))
    coll.add_documents(_docs(rng.normal(size=(100, 16))))
    coll.build_index()
    late = rng.normal(size=(5, 16)).astype(np.float32)
    coll.add_documents(_docs(late, prefix="late"))
    assert coll.search_ann(late[2], k=1)[0].id == "late2"


def test_roundtrip_small(tmp_path, rng):
    coll = Collection(CollectionManifest("m", 8, "local-hash-v1:dim=8:stop=none"))
    coll.add_documents([StoredDocument("ü-1", "Grüße\nzeile", {"k": "v", "f": 0.5, "b": True, "z": None},
                                       rng.normal(size=8))] + _docs(rng.normal(size=(2, 8))))
    persist(coll, tmp_path / "m")
    back = load(tmp_path / "m")
    assert back.manifest == coll.manifest
    assert back.ids() == coll.ids()
    assert back.vectors().tobytes() == coll.vectors().tobytes()
    assert back.get("ü-1").metadata == {"k": "v", "f": 0.5, "b": True, "z": None}
    q = rng.normal(size=8)
    assert back.search_exact(q, 3) == coll.search_exact(q, 3)


def test_vectors_file_layout(tmp_path):
    coll = Collection(CollectionManifest("m", 2, "p"))
    coll.add_documents(_docs([[1.5, -2.0]]))
    coll.persist(tmp_path / "m")
    raw = (tmp_path / "m" / "vectors.bin").read_bytes()
    assert raw == b"SRVC" + struct.pack("<IIQ", 1, 2, 1) + struct.pack("<2f", 1.5, -2.0)


def test_bulk_10k_roundtrip(tmp_path, rng):
    vecs = rng.normal(size=(10_000, 16)).astype(np.float32)
    coll = VectorDB(tmp_path).create_collection("bulk", 16)
    coll.add_documents(_docs(vecs))
    coll.persist()
    back = VectorDB(tmp_path).get_collection("bulk")
    assert back.manifest.count == 10_000
    assert all(back.get(f"d{i}").vector.tobytes() == vecs[i].tobytes() for i in range(10_000))


@pytest.fixture
def saved(tmp_path):
    coll = Collection(CollectionManifest("m", 4, "p"))
    coll.add_documents(_docs(np.eye(4)))
    return coll.persist(tmp_path / "m")


def test_wrong_magic(saved):
    path = saved / "vectors.bin"
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load(saved)


def test_vector_version_mismatch(saved):
    path = saved / "vectors.bin"
    raw = path.read_bytes()
    path.write_bytes(HEADER.pack(MAGIC, 2, 4, 4) + raw[HEADER.size:])
    with pytest.raises(FormatError) as err:
        load(saved)
    assert (err.value.found, err.value.expected) == (2, 1)


def test_manifest_version_mismatch(saved):
    path = saved / "manifest"
    obj = json.loads(path.read_text())
    obj["format_version"] = 7
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError) as err:
        load(saved)
    assert (err.value.found, err.value.expected) == (7, 1)


def test_truncated_vectors(saved):
    path = saved / "vectors.bin"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IntegrityError):
        load(saved)


def test_count_disagreement(saved):
    with open(saved / "documents", "a") as fh:
        fh.write(json.dumps({"id": "extra", "text": "", "metadata": {}}) + "\n")
    with pytest.raises(IntegrityError):
        load(saved)


def test_missing_vectors_file(saved):
    (saved / "vectors.bin").unlink()
    with pytest.raises(IntegrityError):
        load(saved)


def test_concurrent_readers_and_writer(rng):
    coll = Collection(CollectionManifest("m", 8, "p"))
    coll.add_documents(_docs(rng.normal(size=(50, 8))))
    q = rng.normal(size=8)
    errors = []

    def reader():
        try:
            for _ in range(200):
                hits = coll.search_exact(q, k=5)
                assert len(hits) == 5
        except Exception as exc:
            errors.append(exc)

    def writer():
        for b in range(20):
            coll.add_documents(_docs(np.random.default_rng(b).normal(size=(5, 8)), prefix=f"w{b}-"))

    threads = [threading.Thread(target=reader) for _ in range(4)] + [threading.Thread(target=writer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and coll.count() == 150
