"""Scene-grounded retrieval-augmented question answering for wireless sensing data."""

from scene_rag.embedding import HashingEmbedder, RemoteEmbedder, cosine_similarity, make_embedder
from scene_rag.geo import GeoPoint, haversine_distance, initial_bearing
from scene_rag.metrics import EvalConfig, EvalPair, evaluate_corpus, evaluate_pair
from scene_rag.rag import SceneRAG, answer_question, compose_prompt, retrieve_context
from scene_rag.scene import SceneRecord, parse_scene_records, scene_to_text
from scene_rag.store import Collection, StoredDocument, VectorDB
from scene_rag.text import chunk_text, tokenize

__all__ = [
    "Collection", "EvalConfig", "EvalPair", "GeoPoint", "HashingEmbedder", "RemoteEmbedder",
    "SceneRAG", "SceneRecord", "StoredDocument", "VectorDB", "answer_question", "chunk_text",
    "compose_prompt", "cosine_similarity", "evaluate_corpus", "evaluate_pair", "haversine_distance",
    "initial_bearing", "make_embedder", "parse_scene_records", "retrieve_context", "scene_to_text",
    "tokenize",
]
