"""Text embedders and the cosine similarity used everywhere else.

Three providers share one estimator surface (``fit`` / ``transform`` /
``embed`` plus a ``provider_tag`` that collections record):

* :class:`HashingEmbedder` -- signed feature hashing, unit L2 norm, offline.
* :class:`OneHotEmbedder` -- term counts over a fixed vocabulary, raw norm.
* :class:`RemoteEmbedder` -- an ``/embeddings``-shaped HTTP endpoint.
"""

from __future__ import annotations

import functools
import hashlib
import math
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from scene_rag import _http
from scene_rag._validation import DimensionMismatchError, check_texts, check_vector
from scene_rag.text import remove_stopwords, tokenize

DEFAULT_DIM = 384
PROVIDERS = ("local-hash", "bow-onehot", "remote")

_HASH_KEY = b"scene-rag/feature-hash/v1"


# --- cosine -----------------------------------------------------------------


def _rowdot(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise product + pairwise row sum: bit-identical for identical rows
    # wherever they sit, unlike BLAS gemv
    return np.multiply(A, b).sum(axis=-1)


def _pow2_scaled(M: np.ndarray) -> np.ndarray:
    # bring each row's largest magnitude into [0.5, 1) so squared norms neither
    # underflow nor overflow; powers of two keep the scaling exact
    peak = np.abs(M).max(axis=1, initial=0.0, keepdims=True)
    if np.all((peak >= 1e-75) & (peak <= 1e75) | (peak == 0)):
        return M
    _, exp = np.frexp(peak)
    return np.ldexp(M, -exp)


def cosine_scores(M, q) -> np.ndarray:
    """Cosine similarity of ``q`` against every row of ``M`` (float64).

    Rows or queries with zero norm score 0.0.  Results are clamped to [-1, 1].
    """
    M = np.asarray(M, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if M.ndim != 2 or q.ndim != 1:
        raise ValueError("expected a 2-D matrix and a 1-D query")
    if M.shape[1] != q.shape[0]:
        raise DimensionMismatchError(M.shape[1], q.shape[0])
    M, q = _pow2_scaled(M), _pow2_scaled(q[None, :])[0]
    dots = _rowdot(M, q)
    row_sq = _rowdot(M, M)
    q_sq = _rowdot(q[None, :], q)[0]
    denom = np.sqrt(row_sq * q_sq)
    out = np.zeros(M.shape[0], dtype=np.float64)
    np.divide(dots, denom, out=out, where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def cosine_similarity(a, b) -> float:
    """``a.b / (|a| |b|)``, defined as 0.0 when either vector is all zeros.

    >>> cosine_similarity([1, 1], [1, 0])  # doctest: +ELLIPSIS
    0.7071067811865...
    """
    a = check_vector(a)
    b = check_vector(b, a.shape[0])
    return float(cosine_scores(a[None, :], b)[0])


# --- local feature hashing --------------------------------------------------


@functools.lru_cache(maxsize=65536)
def _hash_token(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    return int.from_bytes(digest, "little")


def _preprocess(text: str, stop_list: str | None) -> list[str]:
    tokens = tokenize(text)
    return remove_stopwords(tokens, stop_list) if stop_list else tokens


def embed_local(text: str, dim: int = DEFAULT_DIM, stop_list: str | None = None) -> np.ndarray:
    """Signed feature hashing of ``tokenize(text)`` into ``dim`` buckets, unit L2 norm.

    The low bits of a keyed BLAKE2b digest pick the bucket and the top bit the
    sign.  Text with no tokens maps to the zero vector.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    counts: Counter[int] = Counter()
    for token in _preprocess(text, stop_list):
        h = _hash_token(token)
        counts[h % dim] += -1 if h >> 63 else 1
    vec = np.zeros(dim, dtype=np.float64)
    sq = 0
    for bucket, c in sorted(counts.items()):
        vec[bucket] = c
        sq += c * c
    if sq:
        vec /= math.sqrt(sq)
    return vec


class HashingEmbedder(TransformerMixin, BaseEstimator):
    """Deterministic offline embedder; see :func:`embed_local`.

    Stateless: ``fit`` only validates parameters and ``transform`` works
    without it.
    """

    provider = "local-hash"

    def __init__(self, dim=DEFAULT_DIM, stop_list=None):
        self.dim = dim
        self.stop_list = stop_list

    @property
    def provider_tag(self) -> str:
        return f"local-hash-v1:dim={self.dim}:stop={self.stop_list or 'none'}"

    @property
    def n_features_out(self) -> int:
        return int(self.dim)

    def fit(self, X=None, y=None):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim!r}")
        return self

    def embed(self, text: str) -> np.ndarray:
        return embed_local(text, int(self.dim), self.stop_list)

    def transform(self, X) -> np.ndarray:
        texts = check_texts(X)
        out = np.zeros((len(texts), int(self.dim)), dtype=np.float64)
        for i, t in enumerate(texts):
            out[i] = self.embed(t)
        return out


# --- bag-of-words one-hot ---------------------------------------------------


def _check_vocabulary(vocabulary) -> list[str]:
    vocab = list(vocabulary)
    if not vocab:
        raise ValueError("vocabulary is empty")
    if len(set(vocab)) != len(vocab):
        dupes = sorted(t for t, c in Counter(vocab).items() if c > 1)
        raise ValueError(f"vocabulary has duplicate entries: {dupes[:5]}")
    return vocab


def embed_onehot(text: str, vocabulary, stop_list: str | None = None) -> np.ndarray:
    """Term-frequency vector of ``text`` over ``vocabulary`` (raw counts).

    A single in-vocabulary word gives the classic one-hot vector; words outside
    the vocabulary are ignored.

    >>> embed_onehot("car car bus", ["bus", "car", "truck"]).tolist()
    [1.0, 2.0, 0.0]
    """
    vocab = _check_vocabulary(vocabulary)
    index = {t: i for i, t in enumerate(vocab)}
    vec = np.zeros(len(vocab), dtype=np.float64)
    for token in _preprocess(text, stop_list):
        i = index.get(token)
        if i is not None:
            vec[i] += 1.0
    return vec


class OneHotEmbedder(TransformerMixin, BaseEstimator):
    """Bag-of-words counts over a vocabulary given up front or learned in ``fit``.

    A learned vocabulary is the sorted set of tokens seen in the training texts.
    """

    provider = "bow-onehot"

    def __init__(self, vocabulary=None, stop_list=None):
        self.vocabulary = vocabulary
        self.stop_list = stop_list

    def fit(self, X, y=None):
        if self.vocabulary is not None:
            self.vocabulary_ = _check_vocabulary(self.vocabulary)
        else:
            seen = set()
            for t in check_texts(X):
                seen.update(_preprocess(t, self.stop_list))
            self.vocabulary_ = _check_vocabulary(sorted(seen))
        return self

    @property
    def n_features_out(self) -> int:
        check_is_fitted(self, "vocabulary_")
        return len(self.vocabulary_)

    @property
    def provider_tag(self) -> str:
        check_is_fitted(self, "vocabulary_")
        digest = hashlib.sha256("\n".join(self.vocabulary_).encode("utf-8")).hexdigest()[:12]
        return f"bow-onehot:V={len(self.vocabulary_)}:vocab={digest}:stop={self.stop_list or 'none'}"

    def embed(self, text: str) -> np.ndarray:
        check_is_fitted(self, "vocabulary_")
        return embed_onehot(text, self.vocabulary_, self.stop_list)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "vocabulary_")
        texts = check_texts(X)
        out = np.zeros((len(texts), len(self.vocabulary_)), dtype=np.float64)
        for i, t in enumerate(texts):
            out[i] = embed_onehot(t, self.vocabulary_, self.stop_list)
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "vocabulary_")
        return np.asarray(self.vocabulary_, dtype=object)


# --- remote endpoint --------------------------------------------------------


@dataclass(frozen=True)
class EmbedderConfig:
    provider: str = "local-hash"
    dim: int = DEFAULT_DIM
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key: str | None = None
    stop_list: str | None = None
    vocabulary: tuple[str, ...] | None = None
    timeout: float = _http.DEFAULT_TIMEOUT_S
    max_attempts: int = _http.DEFAULT_ATTEMPTS
    backoff: float = _http.DEFAULT_BACKOFF_S

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}; expected one of {PROVIDERS}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        remote_fields = (self.endpoint_url, self.model_name, self.api_key)
        if self.provider == "remote":
            if not self.endpoint_url or not self.model_name:
                raise ValueError("remote provider needs endpoint_url and model_name")
        elif any(f is not None for f in remote_fields):
            raise ValueError("endpoint_url, model_name and api_key apply only to the remote provider")
        if self.provider == "bow-onehot":
            if not self.vocabulary:
                raise ValueError("bow-onehot provider needs a vocabulary")
        elif self.vocabulary is not None:
            raise ValueError("vocabulary applies only to the bow-onehot provider")


def embed_remote(texts, cfg: EmbedderConfig, *, transport=None) -> list[np.ndarray]:
    """Embed a batch through the remote endpoint, preserving input order.

    Request ``{"model", "input"}``; response ``{"data": [{"index", "embedding"}]}``
    reassembled by ``index``.
    """
    if cfg.provider != "remote":
        raise ValueError(f"embed_remote needs the remote provider, got {cfg.provider!r}")
    texts = check_texts(texts)
    if not texts:
        raise ValueError("embed_remote needs a non-empty batch")
    if cfg.stop_list:
        texts = [" ".join(_preprocess(t, cfg.stop_list)) for t in texts]
    payload = {"model": cfg.model_name, "input": texts}
    data = _http.post_json(
        cfg.endpoint_url,
        payload,
        api_key=cfg.api_key or os.environ.get(_http.API_KEY_ENV),
        timeout=cfg.timeout,
        max_attempts=cfg.max_attempts,
        backoff=cfg.backoff,
        transport=transport,
    )
    items = data.get("data")
    if not isinstance(items, list):
        raise _http.ProtocolError("embedding response has no 'data' list")
    if len(items) != len(texts):
        raise _http.ProtocolError(f"sent {len(texts)} inputs, received {len(items)} embeddings")
    out: list[np.ndarray | None] = [None] * len(texts)
    for pos, item in enumerate(items):
        if not isinstance(item, dict) or "embedding" not in item:
            raise _http.ProtocolError(f"embedding item {pos} is malformed")
        idx = item.get("index", pos)
        if not isinstance(idx, int) or not 0 <= idx < len(texts) or out[idx] is not None:
            raise _http.ProtocolError(f"embedding item {pos} has bad or repeated index {idx!r}")
        try:
            vec = np.asarray(item["embedding"], dtype=np.float64)
        except (TypeError, ValueError):
            raise _http.ProtocolError(f"embedding item {pos} is not a list of numbers") from None
        if vec.ndim != 1:
            raise _http.ProtocolError(f"embedding item {pos} is not a flat list")
        if vec.shape[0] != cfg.dim:
            raise DimensionMismatchError(cfg.dim, vec.shape[0])
        if not np.all(np.isfinite(vec)):
            raise _http.ProtocolError(f"embedding item {pos} contains non-finite values")
        out[idx] = vec
    return out  # type: ignore[return-value]


class RemoteEmbedder(TransformerMixin, BaseEstimator):
    """Client for a hosted embedding model.  ``api_key`` falls back to ``SCENE_RAG_API_KEY``."""

    provider = "remote"

    def __init__(self, endpoint_url=None, model_name=None, dim=DEFAULT_DIM, api_key=None,
                 stop_list=None, batch_size=64, timeout=_http.DEFAULT_TIMEOUT_S,
                 max_attempts=_http.DEFAULT_ATTEMPTS, backoff=_http.DEFAULT_BACKOFF_S,
                 transport=None):
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.dim = dim
        self.api_key = api_key
        self.stop_list = stop_list
        self.batch_size = batch_size
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.transport = transport

    def _config(self) -> EmbedderConfig:
        return EmbedderConfig(
            provider="remote", dim=int(self.dim), endpoint_url=self.endpoint_url,
            model_name=self.model_name, api_key=self.api_key, stop_list=self.stop_list,
            timeout=self.timeout, max_attempts=self.max_attempts, backoff=self.backoff,
        )

    @property
    def provider_tag(self) -> str:
        return f"remote:{self.model_name}:dim={self.dim}:stop={self.stop_list or 'none'}"

    @property
    def n_features_out(self) -> int:
        return int(self.dim)

    def fit(self, X=None, y=None):
        self._config()
        return self

    def embed(self, text: str) -> np.ndarray:
        return self.transform([text])[0]

    def transform(self, X) -> np.ndarray:
        texts = check_texts(X)
        cfg = self._config()
        out = np.zeros((len(texts), cfg.dim), dtype=np.float64)
        step = max(int(self.batch_size), 1)
        for start in range(0, len(texts), step):
            batch = texts[start : start + step]
            out[start : start + len(batch)] = embed_remote(batch, cfg, transport=self.transport)
        return out


def make_embedder(cfg: EmbedderConfig, *, transport=None):
    """Instantiate the estimator matching ``cfg``."""
    if cfg.provider == "local-hash":
        return HashingEmbedder(dim=cfg.dim, stop_list=cfg.stop_list).fit()
    if cfg.provider == "bow-onehot":
        return OneHotEmbedder(vocabulary=list(cfg.vocabulary), stop_list=cfg.stop_list).fit(None)
    return RemoteEmbedder(
        endpoint_url=cfg.endpoint_url, model_name=cfg.model_name, dim=cfg.dim,
        api_key=cfg.api_key, stop_list=cfg.stop_list, timeout=cfg.timeout,
        max_attempts=cfg.max_attempts, backoff=cfg.backoff, transport=transport,
    ).fit()
