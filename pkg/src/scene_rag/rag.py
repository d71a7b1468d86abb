"""Retrieval, prompt composition and generation."""

from __future__ import annotations

import functools
import json
import os
import string
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from scene_rag import _http
from scene_rag.embedding import HashingEmbedder
from scene_rag.scene import SceneRecord, SceneText, scene_to_text
from scene_rag.store import Collection, CollectionManifest, SearchHit, StoredDocument
from scene_rag.text import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, chunk_text

DEFAULT_TOP_K = 4
DEFAULT_TEMPLATE = "wireless-v1"
TEMPLATES = ("wireless-v1",)
NO_CONTEXT = "no retrieved context"
NO_SCENE = "no live scene data"
SEARCH_MODES = ("exact", "ann")
DEFAULT_FIXED_ANSWER = (
    "The image shows a typical urban road with several vehicles, buildings and "
    "trees along the street under a clear sky."
)


class ProviderMismatchError(ValueError):
    """The query embedder differs from the one that filled the collection."""


class UnknownTemplateError(KeyError):
    pass


# --- query and retrieval -----------------------------------------------------


def _body(scene) -> str:
    if scene is None:
        return ""
    if isinstance(scene, SceneText):
        return scene.body
    if isinstance(scene, SceneRecord):
        return scene_to_text(scene).body
    if isinstance(scene, str):
        return scene
    raise TypeError(f"scene must be SceneText, SceneRecord, str or None, got {type(scene).__name__}")


def build_query_text(scene, question: str) -> str:
    """Text that gets embedded for retrieval: scene body, blank line, question."""
    if not isinstance(question, str) or not question.strip():
        raise ValueError("question must be a non-empty string")
    body = _body(scene)
    return f"{body}\n\n{question}" if body else question


@dataclass(frozen=True)
class RetrievedChunk:
    rank: int
    score: float
    text: str
    source: str
    id: str


def describe_source(metadata: dict) -> str:
    src = metadata.get("source")
    if src == "scene" and "scene_id" in metadata:
        return f"scene {metadata['scene_id']}, chunk {metadata.get('chunk_index', 0)}"
    if src == "doc" and "file_name" in metadata:
        return f"{metadata['file_name']}, chunk {metadata.get('chunk_index', 0)}"
    return ", ".join(f"{k}={metadata[k]}" for k in sorted(metadata)) or "unknown source"


def rank_hits(hits: list[SearchHit]) -> list[RetrievedChunk]:
    return [
        RetrievedChunk(rank=i, score=h.score, text=h.text, source=describe_source(h.metadata), id=h.id)
        for i, h in enumerate(hits, start=1)
    ]


def retrieve_context(coll: Collection, query_text: str, embedder, k: int = DEFAULT_TOP_K,
                     mode: str = "exact") -> list[RetrievedChunk]:
    """Embed ``query_text`` and return the collection's top-``k`` chunks, ranked from 1."""
    if mode not in SEARCH_MODES:
        raise ValueError(f"mode must be one of {SEARCH_MODES}, got {mode!r}")
    tag = embedder.provider_tag
    if tag != coll.provider:
        raise ProviderMismatchError(
            f"collection {coll.name!r} was built with {coll.provider!r}, query embedder is {tag!r}"
        )
    q = embedder.embed(query_text)
    hits = coll.search_exact(q, k) if mode == "exact" else coll.search_ann(q, k)
    return rank_hits(hits)


# --- prompt ---------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def load_template(template_id: str) -> tuple[str, string.Template]:
    if template_id not in TEMPLATES:
        raise UnknownTemplateError(f"unknown template {template_id!r}; available: {', '.join(TEMPLATES)}")
    root = resources.files("scene_rag.data.templates")
    system = root.joinpath(f"{template_id}.system.txt").read_text("utf-8").rstrip("\n")
    user = root.joinpath(f"{template_id}.user.txt").read_text("utf-8").rstrip("\n")
    return system, string.Template(user)


@dataclass(frozen=True)
class StructuredPrompt:
    system: str
    scene_context: str
    retrieved: tuple[RetrievedChunk, ...]
    question: str
    template_id: str = DEFAULT_TEMPLATE

    def retrieved_text(self) -> str:
        if not self.retrieved:
            return NO_CONTEXT
        return "\n".join(f"[{c.rank}] ({c.score:.4f}) {c.text} — {c.source}" for c in self.retrieved)

    def user_text(self) -> str:
        _, user = load_template(self.template_id)
        return user.substitute(
            scene_context=self.scene_context or NO_SCENE,
            retrieved=self.retrieved_text(),
            question=self.question,
        )

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user_text()},
        ]

    def serialize(self) -> str:
        return f"{self.system}\n\n{self.user_text()}\n"

    @property
    def prompt_bytes(self) -> bytes:
        return self.serialize().encode("utf-8")


def compose_prompt(scene, hits, question: str, template_id: str = DEFAULT_TEMPLATE) -> StructuredPrompt:
    """Fill the template's four sections.  ``hits`` may be ranked chunks or raw search hits."""
    system, _ = load_template(template_id)
    if not isinstance(question, str) or not question.strip():
        raise ValueError("question must be a non-empty string")
    chunks = list(hits)
    if chunks and isinstance(chunks[0], SearchHit):
        chunks = rank_hits(chunks)
    return StructuredPrompt(system, _body(scene), tuple(chunks), question, template_id)


# --- generation -------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationResult:
    answer: str
    prompt_bytes: bytes
    usage: dict | None
    latency_ms: float
    backend: str


class EchoBackend:
    """Answers with the top-ranked chunk verbatim: a retrieval-only RAG stand-in."""

    name = "echo"

    def complete(self, prompt: StructuredPrompt):
        return (prompt.retrieved[0].text if prompt.retrieved else ""), None


class FixedBackend:
    """Answers every prompt with the same text: a model that ignores retrieval."""

    name = "fixed"

    def __init__(self, answer: str = DEFAULT_FIXED_ANSWER):
        self.answer = answer

    def complete(self, prompt: StructuredPrompt):
        return self.answer, None


class ChatBackend:
    """Client for a ``/chat/completions``-shaped endpoint."""

    name = "remote"

    def __init__(self, endpoint_url: str, model: str, api_key: str | None = None,
                 temperature: float = 0.0, timeout: float = _http.DEFAULT_TIMEOUT_S,
                 max_attempts: int = _http.DEFAULT_ATTEMPTS, backoff: float = _http.DEFAULT_BACKOFF_S,
                 transport=None):
        if not endpoint_url or not model:
            raise ValueError("remote backend needs an endpoint URL and a model name")
        self.endpoint_url = endpoint_url
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.transport = transport

    def complete(self, prompt: StructuredPrompt):
        payload = {"model": self.model, "messages": prompt.messages(), "temperature": self.temperature}
        data = _http.post_json(
            self.endpoint_url, payload,
            api_key=self.api_key or os.environ.get(_http.API_KEY_ENV),
            timeout=self.timeout, max_attempts=self.max_attempts, backoff=self.backoff,
            transport=self.transport,
        )
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise _http.ProtocolError("chat response lacks choices[0].message.content") from None
        if not isinstance(content, str):
            raise _http.ProtocolError("choices[0].message.content is not a string")
        usage = data.get("usage")
        return content, usage if isinstance(usage, dict) else None


def generate(prompt: StructuredPrompt, backend) -> GenerationResult:
    start = time.perf_counter()
    answer, usage = backend.complete(prompt)
    latency = (time.perf_counter() - start) * 1000.0
    return GenerationResult(answer, prompt.prompt_bytes, usage, latency, backend.name)


@dataclass(frozen=True)
class QueryResult:
    question: str
    query_text: str
    hits: tuple[RetrievedChunk, ...]
    prompt: StructuredPrompt
    generation: GenerationResult

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "question": self.question,
            "backend": self.generation.backend,
            "template": self.prompt.template_id,
            "hits": [
                {"rank": h.rank, "id": h.id, "score": h.score, "source": h.source, "text": h.text}
                for h in self.hits
            ],
            "prompt": self.prompt.serialize(),
            "answer": self.generation.answer,
            "usage": self.generation.usage,
        }
        if timing:
            out["latency_ms"] = self.generation.latency_ms
        return out

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), indent=2, ensure_ascii=False) + "\n"


def answer_question(coll: Collection, embedder, question: str, *, scene=None,
                    k: int = DEFAULT_TOP_K, mode: str = "exact", backend=None,
                    template_id: str = DEFAULT_TEMPLATE) -> QueryResult:
    """Query text, retrieval, prompt, generation, in one call."""
    backend = backend if backend is not None else EchoBackend()
    load_template(template_id)
    query_text = build_query_text(scene, question)
    hits = retrieve_context(coll, query_text, embedder, k, mode)
    prompt = compose_prompt(scene, hits, question, template_id)
    return QueryResult(question, query_text, tuple(hits), prompt, generate(prompt, backend))


# --- estimator facade ---------------------------------------------------------------


class SceneRAG(BaseEstimator):
    """Fit a knowledge base from scene records or plain texts, then answer questions.

    ``fit`` chunks and embeds every item into an in-memory collection;
    ``predict`` returns one answer per question.
    """

    def __init__(self, embedder=None, top_k=DEFAULT_TOP_K, mode="exact", backend=None,
                 template_id=DEFAULT_TEMPLATE, chunk_size=DEFAULT_CHUNK_SIZE, overlap=DEFAULT_OVERLAP):
        self.embedder = embedder
        self.top_k = top_k
        self.mode = mode
        self.backend = backend
        self.template_id = template_id
        self.chunk_size = chunk_size
        self.overlap = overlap

    def fit(self, X, y=None):
        X = list(X)
        emb = clone(self.embedder) if self.embedder is not None else HashingEmbedder()
        emb.fit([_body(x) for x in X])
        docs = []
        for n, item in enumerate(X):
            if isinstance(item, SceneRecord):
                doc_id, text, meta = item.scene_id, scene_to_text(item).body, {"source": "scene", "scene_id": item.scene_id}
            else:
                doc_id, text, meta = f"item-{n}", _body(item), {"source": "text", "item": n}
            for ch in chunk_text(doc_id, text, self.chunk_size, self.overlap):
                vec = emb.embed(ch.text)
                docs.append(StoredDocument(f"{doc_id}#{ch.chunk_index}", ch.text,
                                           {**meta, "chunk_index": ch.chunk_index}, vec))
        dim = emb.n_features_out
        coll = Collection(CollectionManifest(name="in-memory", dim=dim, provider=emb.provider_tag))
        coll.add_documents(docs)
        self.collection_ = coll
        self.embedder_ = emb
        return self

    def query(self, question: str, scene=None) -> QueryResult:
        check_is_fitted(self, "collection_")
        return answer_question(self.collection_, self.embedder_, question, scene=scene, k=self.top_k,
                               mode=self.mode, backend=self.backend, template_id=self.template_id)

    def predict(self, X, scenes=None) -> np.ndarray:
        questions = [X] if isinstance(X, str) else list(X)
        scenes = [None] * len(questions) if scenes is None else list(scenes)
        if len(scenes) != len(questions):
            raise ValueError("scenes must align with questions")
        return np.asarray([self.query(q, s).generation.answer for q, s in zip(questions, scenes)], dtype=object)
