"""Persistent collections of documents, metadata and embedding vectors.

On disk a collection is a directory::

    <db>/<name>/manifest      JSON: name, dim, metric, provider, count, format_version, index_params
    <db>/<name>/documents     JSON lines: {"id", "text", "metadata"} in insertion order
    <db>/<name>/vectors.bin   b"SRVC", u32 version, u32 dim, u64 count, then count*dim
                              little-endian float32, one row per document

The HNSW graph is not stored; it is rebuilt from the vectors the first time an
approximate search runs.
"""

from __future__ import annotations

import json
import os
import re
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from scene_rag._validation import DimensionMismatchError
from scene_rag.ann import HNSWIndex
from scene_rag.embedding import cosine_scores

FORMAT_VERSION = 1
MAGIC = b"SRVC"
METRIC = "cosine"
HEADER = struct.Struct("<4sIIQ")

MANIFEST_FILE = "manifest"
DOCUMENTS_FILE = "documents"
VECTORS_FILE = "vectors.bin"

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_SCALAR = (str, int, float, bool, type(None))


class StoreError(Exception):
    """Base class for collection errors."""


class CollectionExistsError(StoreError):
    pass


class CollectionNotFoundError(StoreError):
    pass


class DuplicateIdError(StoreError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate document id {doc_id!r}; batch rejected")
        self.doc_id = doc_id


class FormatError(StoreError):
    """Not a collection file, or a format version this code cannot read."""

    def __init__(self, message: str, found=None, expected=None):
        super().__init__(message)
        self.found = found
        self.expected = expected


class IntegrityError(StoreError):
    """Files disagree with each other or with the manifest (e.g. truncation)."""


@dataclass(frozen=True)
class IndexParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 800

    def __post_init__(self):
        if self.M < 2 or self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError(f"invalid index parameters {self}")


@dataclass(frozen=True)
class CollectionManifest:
    name: str
    dim: int
    provider: str
    count: int = 0
    metric: str = METRIC
    format_version: int = FORMAT_VERSION
    index_params: IndexParams = field(default_factory=IndexParams)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "metric": self.metric,
            "provider": self.provider,
            "count": self.count,
            "format_version": self.format_version,
            "index_params": asdict(self.index_params),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> CollectionManifest:
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"manifest format_version {version!r} is not supported (expected {FORMAT_VERSION})",
                found=version,
                expected=FORMAT_VERSION,
            )
        if obj.get("metric", METRIC) != METRIC:
            raise FormatError(f"unsupported metric {obj.get('metric')!r} (expected {METRIC!r})")
        try:
            return cls(
                name=obj["name"],
                dim=int(obj["dim"]),
                provider=obj["provider"],
                count=int(obj["count"]),
                metric=obj.get("metric", METRIC),
                format_version=version,
                index_params=IndexParams(**obj.get("index_params", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None


@dataclass(frozen=True)
class StoredDocument:
    id: str
    text: str
    metadata: dict = field(default_factory=dict)
    vector: np.ndarray | None = None


@dataclass(frozen=True)
class SearchHit:
    id: str
    score: float
    text: str
    metadata: dict


@dataclass(frozen=True)
class _Snapshot:
    ids: tuple[str, ...]
    texts: tuple[str, ...]
    metadata: tuple[dict, ...]
    vectors: np.ndarray  # float32, read-only
    vectors64: np.ndarray
    position: dict[str, int]


def _empty_snapshot(dim: int) -> _Snapshot:
    v = np.zeros((0, dim), dtype=np.float32)
    v.flags.writeable = False
    return _Snapshot((), (), (), v, v.astype(np.float64), {})


def _check_metadata(doc_id: str, metadata) -> dict:
    if metadata is None:
        return {}
    if not isinstance(metadata, dict):
        raise TypeError(f"document {doc_id!r}: metadata must be a dict")
    for k, v in metadata.items():
        if not isinstance(k, str):
            raise TypeError(f"document {doc_id!r}: metadata keys must be strings, got {k!r}")
        if not isinstance(v, _SCALAR):
            raise TypeError(f"document {doc_id!r}: metadata[{k!r}] must be a scalar, got {type(v).__name__}")
    return dict(metadata)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class Collection:
    """An in-memory collection, optionally bound to a directory on disk.

    Searches read an immutable snapshot, so they may run alongside each other
    and alongside a writer; :meth:`add_documents` serialises writers and swaps
    the snapshot in one step once a batch has fully validated.
    """

    def __init__(self, manifest: CollectionManifest, path: str | os.PathLike | None = None):
        if manifest.dim < 1:
            raise ValueError(f"dim must be >= 1, got {manifest.dim}")
        self._manifest = manifest
        self.path = Path(path) if path is not None else None
        self._snap = _empty_snapshot(manifest.dim)
        self._write_lock = threading.Lock()
        self._index_lock = threading.Lock()
        self._index: HNSWIndex | None = None

    # -- introspection

    @property
    def name(self) -> str:
        return self._manifest.name

    @property
    def dim(self) -> int:
        return self._manifest.dim

    @property
    def provider(self) -> str:
        return self._manifest.provider

    @property
    def index_params(self) -> IndexParams:
        return self._manifest.index_params

    @property
    def manifest(self) -> CollectionManifest:
        return CollectionManifest(
            name=self.name, dim=self.dim, provider=self.provider, count=len(self._snap.ids),
            index_params=self.index_params,
        )

    def count(self) -> int:
        return len(self._snap.ids)

    __len__ = count

    def ids(self) -> list[str]:
        return list(self._snap.ids)

    def get(self, doc_id: str) -> StoredDocument:
        snap = self._snap
        i = snap.position.get(doc_id)
        if i is None:
            raise KeyError(doc_id)
        return StoredDocument(doc_id, snap.texts[i], dict(snap.metadata[i]), snap.vectors[i].copy())

    def vectors(self) -> np.ndarray:
        """All stored vectors (float32, insertion order, read-only view)."""
        return self._snap.vectors

    # -- writes

    def add_documents(self, docs) -> int:
        """Append a batch.  Nothing is added unless every document is valid."""
        docs = list(docs)
        if not docs:
            return 0
        with self._write_lock:
            snap = self._snap
            batch_ids: set[str] = set()
            rows = np.empty((len(docs), self.dim), dtype=np.float32)
            metas = []
            for i, d in enumerate(docs):
                if not isinstance(d, StoredDocument):
                    raise TypeError(f"item {i} is {type(d).__name__}, expected StoredDocument")
                if not isinstance(d.id, str) or not d.id:
                    raise ValueError(f"item {i}: id must be a non-empty string")
                if not isinstance(d.text, str):
                    raise TypeError(f"document {d.id!r}: text must be a string")
                if d.id in snap.position or d.id in batch_ids:
                    raise DuplicateIdError(d.id)
                batch_ids.add(d.id)
                vec = np.asarray(d.vector, dtype=np.float64) if d.vector is not None else None
                if vec is None or vec.ndim != 1:
                    raise ValueError(f"document {d.id!r}: vector must be 1-D")
                if vec.shape[0] != self.dim:
                    raise DimensionMismatchError(self.dim, vec.shape[0])
                if not np.all(np.isfinite(vec)):
                    raise ValueError(f"document {d.id!r}: vector has non-finite values")
                rows[i] = vec
                metas.append(_check_metadata(d.id, d.metadata))
            if not np.all(np.isfinite(rows)):
                raise ValueError("vector values overflow float32")
            vectors = np.concatenate([snap.vectors, rows])
            vectors.flags.writeable = False
            vectors64 = np.concatenate([snap.vectors64, rows.astype(np.float64)])
            vectors64.flags.writeable = False
            start = len(snap.ids)
            position = dict(snap.position)
            position.update((d.id, start + i) for i, d in enumerate(docs))
            new = _Snapshot(
                ids=snap.ids + tuple(d.id for d in docs),
                texts=snap.texts + tuple(d.text for d in docs),
                metadata=snap.metadata + tuple(metas),
                vectors=vectors,
                vectors64=vectors64,
                position=position,
            )
            with self._index_lock:
                if self._index is not None:
                    self._index.partial_fit(rows)
                self._snap = new
        return len(docs)

    # -- search

    def _query(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1:
            raise ValueError(f"query must be 1-D, got shape {q.shape}")
        if q.shape[0] != self.dim:
            raise DimensionMismatchError(self.dim, q.shape[0])
        if not np.all(np.isfinite(q)):
            raise ValueError("query has non-finite values")
        # rounded to storage precision so a stored vector matches itself exactly
        return q.astype(np.float32).astype(np.float64)

    @staticmethod
    def _check_k(k) -> int:
        if isinstance(k, bool) or int(k) != k or k < 1:
            raise ValueError(f"k must be a positive integer, got {k!r}")
        return int(k)

    def _hits(self, snap: _Snapshot, order, scores) -> list[SearchHit]:
        return [
            SearchHit(snap.ids[i], float(scores[i]), snap.texts[i], dict(snap.metadata[i]))
            for i in order
        ]

    def search_exact(self, query, k: int = 4) -> list[SearchHit]:
        """Top-``k`` by cosine over every stored vector; ties go to the earlier insert."""
        k = self._check_k(k)
        q = self._query(query)
        snap = self._snap
        if not snap.ids:
            return []
        scores = cosine_scores(snap.vectors64, q)
        order = np.argsort(-scores, kind="stable")[:k]
        return self._hits(snap, order, scores)

    def _ensure_index(self, snap: _Snapshot) -> HNSWIndex:
        if self._index is None or self._index.n_samples_ != len(snap.ids):
            p = self.index_params
            self._index = HNSWIndex(
                M=p.M, ef_construction=p.ef_construction, ef_search=p.ef_search, random_state=0
            ).fit(snap.vectors)
        return self._index

    def build_index(self) -> None:
        with self._index_lock:
            self._ensure_index(self._snap)

    def search_ann(self, query, k: int = 4) -> list[SearchHit]:
        """Top-``k`` through the HNSW graph.

        The graph proposes its ``ef_search`` best candidates; those are
        rescored with the same cosine as :meth:`search_exact` and ordered the
        same way.
        """
        k = self._check_k(k)
        q = self._query(query)
        with self._index_lock:
            snap = self._snap
            if not snap.ids:
                return []
            index = self._ensure_index(snap)
            pool = max(k, self.index_params.ef_search)
            cand = index.candidates(q, min(pool, len(snap.ids)))
        cand = np.sort(cand)
        scores = cosine_scores(snap.vectors64[cand], q)
        order = np.argsort(-scores, kind="stable")[:k]
        full = np.zeros(len(snap.ids))
        full[cand] = scores
        return self._hits(snap, cand[order], full)

    # -- persistence

    def persist(self, path: str | os.PathLike | None = None) -> Path:
        """Write the collection to ``path`` (default: the directory it was loaded from)."""
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("collection has no path; pass one to persist()")
        with self._write_lock:
            snap = self._snap
            manifest = self.manifest
            target.mkdir(parents=True, exist_ok=True)
            header = HEADER.pack(MAGIC, FORMAT_VERSION, self.dim, len(snap.ids))
            _write_atomic(target / VECTORS_FILE, header + snap.vectors.astype("<f4").tobytes())
            docs = "".join(
                json.dumps({"id": i, "text": t, "metadata": m}, ensure_ascii=False, sort_keys=True) + "\n"
                for i, t, m in zip(snap.ids, snap.texts, snap.metadata)
            )
            _write_atomic(target / DOCUMENTS_FILE, docs.encode("utf-8"))
            _write_atomic(
                target / MANIFEST_FILE,
                (json.dumps(manifest.to_dict(), indent=2) + "\n").encode("utf-8"),
            )
        if self.path is None:
            self.path = target
        return target

    @classmethod
    def load(cls, path: str | os.PathLike) -> Collection:
        path = Path(path)
        mpath = path / MANIFEST_FILE
        if not mpath.is_file():
            raise CollectionNotFoundError(f"no collection manifest at {mpath}")
        try:
            manifest = CollectionManifest.from_dict(json.loads(mpath.read_text("utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath} is not valid JSON: {exc.msg}") from None

        try:
            raw = (path / VECTORS_FILE).read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"{path / VECTORS_FILE} is missing") from None
        if len(raw) < HEADER.size or raw[:4] != MAGIC:
            raise FormatError(f"{path / VECTORS_FILE}: bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
        _, version, dim, count = HEADER.unpack_from(raw)
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{path / VECTORS_FILE}: format_version {version} found, {FORMAT_VERSION} expected",
                found=version,
                expected=FORMAT_VERSION,
            )
        if dim != manifest.dim or count != manifest.count:
            raise IntegrityError(
                f"vector header says {count}x{dim}, manifest says {manifest.count}x{manifest.dim}"
            )
        expected = HEADER.size + count * dim * 4
        if len(raw) != expected:
            raise IntegrityError(f"{path / VECTORS_FILE} has {len(raw)} bytes, expected {expected}")
        vectors = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(count, dim)
        vectors = vectors.astype(np.float32)

        ids, texts, metas = [], [], []
        if not (path / DOCUMENTS_FILE).is_file():
            raise IntegrityError(f"{path / DOCUMENTS_FILE} is missing")
        with open(path / DOCUMENTS_FILE, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                try:
                    rec = json.loads(line)
                    ids.append(rec["id"])
                    texts.append(rec["text"])
                    metas.append(rec.get("metadata") or {})
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise IntegrityError(f"{path / DOCUMENTS_FILE} line {n} is malformed") from None
        if len(ids) != count:
            raise IntegrityError(f"{path / DOCUMENTS_FILE} has {len(ids)} records, manifest says {count}")
        if len(set(ids)) != count:
            raise IntegrityError(f"{path / DOCUMENTS_FILE} repeats document ids")

        coll = cls(manifest, path)
        vectors.flags.writeable = False
        v64 = vectors.astype(np.float64)
        v64.flags.writeable = False
        coll._snap = _Snapshot(
            tuple(ids), tuple(texts), tuple(metas), vectors, v64, {d: i for i, d in enumerate(ids)}
        )
        return coll


def persist(coll: Collection, path) -> Path:
    return coll.persist(path)


def load(path) -> Collection:
    return Collection.load(path)


class VectorDB:
    """A directory holding one sub-directory per collection."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def _dir(self, name: str) -> Path:
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise ValueError(f"invalid collection name {name!r}")
        return self.path / name

    def has_collection(self, name: str) -> bool:
        return (self._dir(name) / MANIFEST_FILE).is_file()

    def list_collections(self) -> list[str]:
        if not self.path.is_dir():
            return []
        return sorted(p.name for p in self.path.iterdir() if (p / MANIFEST_FILE).is_file())

    def create_collection(self, name: str, dim: int, provider: str = "unspecified",
                          index_params: IndexParams | None = None) -> Collection:
        target = self._dir(name)
        if isinstance(dim, bool) or not isinstance(dim, (int, np.integer)) or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        if target.exists():
            raise CollectionExistsError(f"collection {name!r} already exists at {target}")
        manifest = CollectionManifest(name=name, dim=int(dim), provider=provider,
                                      index_params=index_params or IndexParams())
        coll = Collection(manifest, target)
        coll.persist()
        return coll

    def get_collection(self, name: str) -> Collection:
        target = self._dir(name)
        if not (target / MANIFEST_FILE).is_file():
            raise CollectionNotFoundError(f"no collection {name!r} under {self.path}")
        return Collection.load(target)
