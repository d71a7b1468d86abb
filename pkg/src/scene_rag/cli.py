"""``scene-rag`` command line: ingest, query, evaluate, geodesy, inspect.

Exit status: 0 success, 2 configuration error, 3 runtime error.  Machine
readable output goes to stdout (or ``--out``); human summaries go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from scene_rag import _http
from scene_rag.embedding import DEFAULT_DIM, EmbedderConfig, make_embedder
from scene_rag.geo import GeoDomainError, GeoPoint, haversine_distance, initial_bearing
from scene_rag.metrics import DEFAULT_OMEGA, EvalConfig, evaluate_corpus, load_eval_pairs
from scene_rag.rag import (
    DEFAULT_FIXED_ANSWER, DEFAULT_TEMPLATE, DEFAULT_TOP_K, SEARCH_MODES, TEMPLATES,
    ChatBackend, EchoBackend, FixedBackend, ProviderMismatchError, answer_question,
)
from scene_rag.scene import AnnotationEndpoint, annotate_scene, parse_scene_records, scene_to_text
from scene_rag.store import (
    Collection, CollectionManifest, CollectionNotFoundError, IndexParams, StoreError,
    StoredDocument, VectorDB,
)
from scene_rag.text import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP, DEFAULT_STOP_LIST, STOP_LISTS, chunk_text

logger = logging.getLogger("scene_rag")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    """Bad flags or unusable inputs, detected before any side effect."""


# --- argument helpers ---------------------------------------------------------


def _stop_list(value: str) -> str | None:
    if value == "none":
        return None
    if value not in STOP_LISTS:
        raise argparse.ArgumentTypeError(f"unknown stop list {value!r} (choose from none, {', '.join(STOP_LISTS)})")
    return value


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _latlon(value: str) -> tuple[float, float]:
    parts = value.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LAT,LON, got {value!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAT,LON numbers, got {value!r}") from None


def _add_db(p: argparse.ArgumentParser) -> None:
    p.add_argument("--db", required=True, help="database directory holding collections")
    p.add_argument("--collection", default="knowledge-base", help="collection name")


def _add_embed(p: argparse.ArgumentParser, stop_list: bool = True) -> None:
    g = p.add_argument_group("embedding")
    g.add_argument("--embed", choices=("local", "remote"), default="local", help="embedding provider")
    g.add_argument("--embed-endpoint", help="embeddings endpoint URL (remote provider)")
    g.add_argument("--embed-model", help="embedding model name (remote provider)")
    g.add_argument("--dim", type=_positive_int, default=DEFAULT_DIM, help="embedding dimension")
    g.add_argument("--api-key", default=None,
                   help=f"bearer token for remote endpoints; falls back to ${_http.API_KEY_ENV}")
    if stop_list:
        g.add_argument("--stop-list", type=_stop_list, default=DEFAULT_STOP_LIST,
                       help="stop words dropped before embedding ('none' keeps all)")


def _add_chunking(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("chunking and index")
    g.add_argument("--chunk-size", type=_positive_int, default=DEFAULT_CHUNK_SIZE, help="tokens per chunk")
    g.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP, help="tokens shared by neighbouring chunks")
    g.add_argument("--hnsw-m", type=_positive_int, default=IndexParams.M, help="HNSW links per node (new collections)")
    g.add_argument("--ef-construction", type=_positive_int, default=IndexParams.ef_construction,
                   help="HNSW build beam width (new collections)")
    g.add_argument("--ef-search", type=_positive_int, default=IndexParams.ef_search,
                   help="HNSW query beam width (new collections)")


def _api_key(args) -> str | None:
    return args.api_key or os.environ.get(_http.API_KEY_ENV)


def _embedder(args, stop_list=None):
    try:
        if args.embed == "remote":
            cfg = EmbedderConfig(provider="remote", dim=args.dim, endpoint_url=args.embed_endpoint,
                                 model_name=args.embed_model, api_key=_api_key(args), stop_list=stop_list)
        else:
            if args.embed_endpoint or args.embed_model:
                raise ConfigError("--embed-endpoint/--embed-model need --embed remote")
            cfg = EmbedderConfig(provider="local-hash", dim=args.dim, stop_list=stop_list)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return make_embedder(cfg)


def _check_chunking(args) -> None:
    if not 0 <= args.overlap < args.chunk_size:
        raise ConfigError(f"--overlap must satisfy 0 <= overlap < chunk-size ({args.overlap} vs {args.chunk_size})")


def _open_or_new(args, embedder) -> tuple[Collection, bool]:
    db = VectorDB(args.db)
    try:
        exists = db.has_collection(args.collection)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if exists:
        coll = db.get_collection(args.collection)
        if coll.provider != embedder.provider_tag:
            raise ConfigError(
                f"collection {coll.name!r} uses {coll.provider!r}, current embedder is {embedder.provider_tag!r}"
            )
        return coll, False
    try:
        params = IndexParams(M=args.hnsw_m, ef_construction=args.ef_construction, ef_search=args.ef_search)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest = CollectionManifest(name=args.collection, dim=embedder.n_features_out,
                                  provider=embedder.provider_tag, index_params=params)
    return Collection(manifest, Path(args.db) / args.collection), True


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_input(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


# --- commands -------------------------------------------------------------------


def _embed_docs(embedder, items):
    # items: (doc_id, text, metadata); one batched transform for remote providers
    if not items:
        return []
    vectors = embedder.transform([t for _, t, _ in items])
    return [StoredDocument(i, t, m, v) for (i, t, m), v in zip(items, vectors)]


def cmd_ingest_scenes(args) -> int:
    _check_chunking(args)
    embedder = _embedder(args, args.stop_list)
    records = parse_scene_records(_read_input(args.scenes_file))
    if args.annotate_endpoint:
        ep = AnnotationEndpoint(args.annotate_endpoint, api_key=_api_key(args))
        records = [annotate_scene(r, ep) if r.image_ref else r for r in records]
    coll, new = _open_or_new(args, embedder)
    items = []
    for rec in records:
        body = scene_to_text(rec).body
        for ch in chunk_text(rec.scene_id, body, args.chunk_size, args.overlap):
            items.append((f"scene:{rec.scene_id}#{ch.chunk_index}", ch.text,
                          {"source": "scene", "scene_id": rec.scene_id, "chunk_index": ch.chunk_index}))
    docs = _embed_docs(embedder, items)
    coll.add_documents(docs)
    coll.persist()
    summary = {"collection": coll.name, "records": len(records), "chunks": len(items),
               "vectors": len(docs), "count": coll.count(), "created": new}
    sys.stdout.write(json.dumps(summary) + "\n")
    print(f"ingested {len(records)} records, {len(items)} chunks, {len(docs)} vectors "
          f"into {coll.name!r} ({coll.count()} documents)", file=sys.stderr)
    return EXIT_OK


def _read_text_file(path: Path) -> str | None:
    try:
        data = path.read_bytes()
    except OSError as exc:
        logger.warning("skipping %s: %s", path, exc)
        return None
    if b"\x00" in data:
        logger.warning("skipping %s: looks binary", path)
        return None
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        logger.warning("skipping %s: not UTF-8 text", path)
        return None


def cmd_ingest_docs(args) -> int:
    _check_chunking(args)
    root = Path(args.docs_dir)
    if not root.is_dir():
        raise ConfigError(f"no such directory: {args.docs_dir}")
    embedder = _embedder(args, args.stop_list)
    files = sorted(p for p in root.rglob("*") if p.is_file())
    items, ok, skipped = [], 0, 0
    for path in files:
        text = _read_text_file(path)
        if text is None:
            skipped += 1
            continue
        ok += 1
        name = path.relative_to(root).as_posix()
        for ch in chunk_text(name, text, args.chunk_size, args.overlap):
            items.append((f"doc:{name}#{ch.chunk_index}", ch.text,
                          {"source": "doc", "file_name": name, "chunk_index": ch.chunk_index}))
    coll, new = _open_or_new(args, embedder)
    docs = _embed_docs(embedder, items)
    coll.add_documents(docs)
    coll.persist()
    summary = {"collection": coll.name, "files": ok, "skipped": skipped, "chunks": len(items),
               "vectors": len(docs), "count": coll.count(), "created": new}
    sys.stdout.write(json.dumps(summary) + "\n")
    print(f"ingested {ok} files ({skipped} skipped), {len(items)} chunks into {coll.name!r}", file=sys.stderr)
    return EXIT_OK


def _backend(args):
    if args.backend == "echo":
        return EchoBackend()
    if args.backend == "fixed":
        return FixedBackend(args.fixed_answer)
    if not args.llm_endpoint or not args.llm_model:
        raise ConfigError("--backend remote needs --llm-endpoint and --llm-model")
    return ChatBackend(args.llm_endpoint, args.llm_model, api_key=_api_key(args))


def cmd_query(args) -> int:
    embedder = _embedder(args, args.stop_list)
    backend = _backend(args)
    scene = None
    if args.scene:
        records = parse_scene_records(_read_input(args.scene))
        if args.scene_id:
            records = [r for r in records if r.scene_id == args.scene_id]
        if len(records) != 1:
            raise ConfigError(f"--scene must resolve to exactly one record, found {len(records)} (use --scene-id)")
        scene = scene_to_text(records[0])
    db = VectorDB(args.db)
    try:
        coll = db.get_collection(args.collection)
    except (CollectionNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        result = answer_question(coll, embedder, args.question, scene=scene, k=args.top_k,
                                 mode=args.mode, backend=backend, template_id=args.template)
    except ProviderMismatchError as exc:
        raise ConfigError(str(exc)) from None
    _emit(result.to_json(timing=args.timing), args.out)
    print(f"{len(result.hits)} hits, answer {len(result.generation.answer)} chars, "
          f"{result.generation.latency_ms:.1f} ms", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    embedder = _embedder(args)
    try:
        cfg = EvalConfig(omega=args.omega, multiset=args.multiset, stop_list=args.stop_list,
                         correctness_cosine=args.correctness_cosine, embedder=embedder)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    pairs = load_eval_pairs(_read_input(args.pairs))
    if not pairs:
        raise ConfigError(f"{args.pairs} holds no pairs")
    report = evaluate_corpus(pairs, cfg)
    _emit(report.to_json(), args.out)
    agg = report.aggregate
    print(f"{len(pairs)} pairs: correctness {agg['correctness']['mean']:.4f}, "
          f"faithfulness {agg['faithfulness']['mean']:.4f}, "
          f"similarity {agg['semantic_similarity']['mean']:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_geo(args) -> int:
    try:
        a = GeoPoint(*args.from_)
        b = GeoPoint(*args.to)
    except GeoDomainError as exc:
        raise ConfigError(str(exc)) from None
    value = haversine_distance(a, b) if args.op == "dist" else initial_bearing(a, b)
    sys.stdout.write(f"{value:.6f}\n")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        coll = VectorDB(args.db).get_collection(args.collection)
    except (CollectionNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    sys.stdout.write(json.dumps(coll.manifest.to_dict(), indent=2) + "\n")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="scene-rag", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-scenes", help="add scene records to a collection", formatter_class=fmt)
    p.add_argument("scenes_file", help="JSON-lines scene records")
    _add_db(p)
    _add_embed(p)
    _add_chunking(p)
    p.add_argument("--annotate-endpoint", help="caption service for records with image_ref and no caption")
    p.set_defaults(func=cmd_ingest_scenes)

    p = sub.add_parser("ingest-docs", help="add plain-text documents to a collection", formatter_class=fmt)
    p.add_argument("docs_dir", help="directory of UTF-8 text files (searched recursively)")
    _add_db(p)
    _add_embed(p)
    _add_chunking(p)
    p.set_defaults(func=cmd_ingest_docs)

    p = sub.add_parser("query", help="retrieve context and generate an answer", formatter_class=fmt)
    _add_db(p)
    p.add_argument("--question", required=True, help="question to answer")
    p.add_argument("--scene", help="JSON-lines file holding the live scene record")
    p.add_argument("--scene-id", help="record to use when --scene holds several")
    p.add_argument("--top-k", type=_positive_int, default=DEFAULT_TOP_K, help="chunks to retrieve")
    p.add_argument("--mode", choices=SEARCH_MODES, default="exact", help="brute-force or graph search")
    p.add_argument("--backend", choices=("echo", "fixed", "remote"), default="echo",
                   help="answer generator")
    p.add_argument("--fixed-answer", default=DEFAULT_FIXED_ANSWER, help="answer returned by --backend fixed")
    p.add_argument("--llm-endpoint", help="chat completions URL (remote backend)")
    p.add_argument("--llm-model", help="chat model name (remote backend)")
    p.add_argument("--template", choices=TEMPLATES, default=DEFAULT_TEMPLATE, help="prompt template")
    p.add_argument("--timing", action="store_true", help="include latency_ms in the report")
    p.add_argument("--out", help="write the report here instead of stdout")
    _add_embed(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score response/ground-truth pairs", formatter_class=fmt)
    p.add_argument("--pairs", required=True, help="JSON-lines pairs: pair_id, response, ground_truth[, question]")
    p.add_argument("--omega", type=float, default=DEFAULT_OMEGA, help="cosine weight in correctness")
    p.add_argument("--multiset", action="store_true", help="count repeated tokens in the overlap metrics")
    p.add_argument("--stop-list", type=_stop_list, default=None,
                   help="stop words dropped before the token metrics ('none' keeps all)")
    p.add_argument("--correctness-cosine", choices=("tf", "embedding"), default="tf",
                   help="cosine used inside correctness")
    p.add_argument("--out", help="write the report here instead of stdout")
    _add_embed(p, stop_list=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("geo", help="great-circle distance (km) or initial bearing (deg)", formatter_class=fmt,
                       epilog="Negative values need the '=' form, e.g. --from=-33.9,18.4")
    p.add_argument("op", choices=("dist", "bearing"))
    p.add_argument("--from", dest="from_", type=_latlon, required=True, metavar="LAT,LON")
    p.add_argument("--to", type=_latlon, required=True, metavar="LAT,LON")
    p.set_defaults(func=cmd_geo)

    p = sub.add_parser("inspect", help="print a collection manifest", formatter_class=fmt)
    _add_db(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or exc.__class__.__name__


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, _http.EndpointError, _http.ProtocolError, ValueError, KeyError, OSError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
