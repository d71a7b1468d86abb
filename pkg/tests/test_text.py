import pytest
from hypothesis import given, strategies as st

from oracles import scan_tokens
from scene_rag.text import (
    ChunkingError, chunk_text, load_stop_list, remove_stopwords, token_spans, tokenize,
)


def test_tokenize_examples():
    assert tokenize("") == []
    assert tokenize("TX–RX distance: 0.412 km") == ["tx", "rx", "distance", "0", "412", "km"]
    assert tokenize("Car car CAR") == ["car", "car", "car"]


def test_underscore_and_punctuation_split():
    assert tokenize("beam_17, array-3!") == ["beam", "17", "array", "3"]


def test_non_ascii_letters_and_digits_kept():
    assert tokenize("Straße ÉCOLE ٣٤") == ["straße", "école", "٣٤"]


def test_stopwords_examples():
    assert remove_stopwords(["the", "car", "is", "red"]) == ["car", "red"]
    assert remove_stopwords([]) == []
    assert remove_stopwords(["car", "red"]) == ["car", "red"]


def test_stop_list_asset():
    words = load_stop_list("en-v1")
    assert {"the", "is"} <= words
    assert 40 <= len(words) <= 70
    assert all(tokenize(w) == [w] for w in words)


def test_unknown_stop_list():
    with pytest.raises(KeyError):
        remove_stopwords(["a"], "xx-v9")


@given(st.text())
def test_tokenize_matches_character_scan(text):
    assert tokenize(text) == scan_tokens(text)


@given(st.text())
def test_tokenize_idempotent(text):
    tokens = tokenize(text)
    assert tokenize(" ".join(tokens)) == tokens


@given(st.text())
def test_tokens_nonempty_without_whitespace(text):
    for t in tokenize(text):
        assert t and not any(c.isspace() for c in t)


@given(st.text())
def test_spans_point_into_original(text):
    for tok, start, end in token_spans(text):
        assert tokenize(text[start:end]) == [tok]


def _words(n):
    return " ".join(f"w{i}" for i in range(n))


def test_chunk_short_text_single_chunk():
    chunks = chunk_text("d", _words(10))
    assert len(chunks) == 1 and chunks[0].token_count == 10


def test_chunk_300_tokens_default_windows():
    chunks = chunk_text("d", _words(300))
    assert [(c.token_start, c.token_end) for c in chunks] == [(0, 256), (224, 300)]
    assert chunks[1].text.startswith("w224 ") and chunks[1].text.endswith("w299")


def test_chunk_empty_text():
    assert chunk_text("d", "") == []
    assert chunk_text("d", " ,;- ") == []


def test_chunk_text_keeps_original_casing_and_punctuation():
    chunks = chunk_text("d", "Hello, World! Foo BAR.", chunk_size=2, overlap=0)
    assert [c.text for c in chunks] == ["Hello, World!", "Foo BAR."]


@pytest.mark.parametrize("size, overlap", [(4, 4), (4, 5), (4, -1), (0, 0)])
def test_bad_chunking_rejected(size, overlap):
    with pytest.raises(ChunkingError):
        chunk_text("d", "a b c", size, overlap)


@given(st.integers(0, 400), st.integers(1, 40), st.data())
def test_chunk_coverage_and_overlap(n, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    text = _words(n)
    chunks = chunk_text("d", text, size, overlap)
    tokens = tokenize(text)
    if n == 0:
        assert chunks == []
        return
    assert chunks[0].token_start == 0 and chunks[-1].token_end == n
    assert [c.chunk_index for c in chunks] == list(range(len(chunks)))
    for c in chunks:
        assert 1 <= c.token_count <= size
        assert tokenize(c.text) == tokens[c.token_start:c.token_end]
    for a, b in zip(chunks, chunks[1:]):
        assert a.token_end - b.token_start == overlap
