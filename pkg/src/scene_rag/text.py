"""Tokenisation, stop-word filtering and sliding-window chunking."""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources

DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 32
DEFAULT_STOP_LIST = "en-v1"
STOP_LISTS = ("en-v1",)

# a token is a maximal run of characters for which str.isalnum() holds
_TOKEN_RE = re.compile(r"[^\W_]+")


class ChunkingError(ValueError):
    """Invalid chunk size / overlap combination."""


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    chunk_index: int
    text: str
    token_count: int
    token_start: int
    token_end: int


@functools.lru_cache(maxsize=4096)
def _lower_char(c: str) -> str:
    low = c.lower()
    # simple case mapping: U+0130 lowercases to "i" plus a combining dot
    return low if len(low) == 1 else low[0]


def _lower(token: str) -> str:
    if token.isascii():
        return token.lower()
    return "".join(map(_lower_char, token))


def token_spans(text: str) -> list[tuple[str, int, int]]:
    """``(token, start, end)`` for every token, with ``text[start:end]`` unfolded."""
    return [(_lower(m.group()), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    """Split on runs of non-alphanumeric characters and lowercase.

    >>> tokenize("TX–RX distance: 0.412 km")
    ['tx', 'rx', 'distance', '0', '412', 'km']
    """
    return [_lower(m.group()) for m in _TOKEN_RE.finditer(text)]


@functools.lru_cache(maxsize=None)
def load_stop_list(list_id: str) -> frozenset[str]:
    if list_id not in STOP_LISTS:
        raise KeyError(f"unknown stop list {list_id!r}; available: {', '.join(STOP_LISTS)}")
    raw = resources.files("scene_rag.data").joinpath(f"stopwords-{list_id}.txt").read_text("utf-8")
    return frozenset(w.strip() for w in raw.splitlines() if w.strip())


def remove_stopwords(tokens: list[str], list_id: str = DEFAULT_STOP_LIST) -> list[str]:
    stop = load_stop_list(list_id)
    return [t for t in tokens if t not in stop]


def chunk_text(
    doc_id: str,
    text: str,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    """Cut ``text`` into windows of ``chunk_size`` tokens overlapping by ``overlap``.

    Windows advance by ``chunk_size - overlap`` tokens and the last partial
    window is kept.  Each chunk's text is the slice of the original string from
    its first token up to the next window-external token (or the end of the
    text), with trailing whitespace dropped.  Casing and punctuation survive,
    and re-tokenizing a chunk yields exactly its window.
    """
    if chunk_size < 1:
        raise ChunkingError(f"chunk_size must be >= 1, got {chunk_size}")
    if not 0 <= overlap < chunk_size:
        raise ChunkingError(
            f"overlap must satisfy 0 <= overlap < chunk_size, got overlap={overlap}, chunk_size={chunk_size}"
        )
    spans = token_spans(text)
    n = len(spans)
    stride = chunk_size - overlap
    chunks = []
    start = 0
    while start < n:
        end = min(start + chunk_size, n)
        stop = spans[end][1] if end < n else len(text)
        chunks.append(
            Chunk(
                doc_id=doc_id,
                chunk_index=len(chunks),
                text=text[spans[start][1] : stop].rstrip(),
                token_count=end - start,
                token_start=start,
                token_end=end,
            )
        )
        if end == n:
            break
        start += stride
    return chunks
