"""Answer-quality metrics for response / ground-truth pairs.

Token metrics (precision, recall, F1, faithfulness) work on token *sets* by
default; ``multiset=True`` switches to clipped counts.  ``tf_cosine`` compares
term-frequency vectors, and is the cosine inside ``correctness``.
``semantic_similarity`` and ``relevancy`` compare embeddings instead.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field, fields

from scene_rag.embedding import HashingEmbedder, cosine_similarity
from scene_rag.text import remove_stopwords, tokenize

DEFAULT_OMEGA = 0.25
METRICS = (
    "precision", "recall", "f1", "tf_cosine", "correctness",
    "faithfulness", "semantic_similarity", "relevancy",
)


def _tokens(text: str, stop_list: str | None) -> list[str]:
    toks = tokenize(text)
    return remove_stopwords(toks, stop_list) if stop_list else toks


def token_set(text: str, stop_list: str | None = None) -> set[str]:
    """Distinct tokens of ``text``; stop words are kept unless a list is named."""
    return set(_tokens(text, stop_list))


def token_bag(text: str, stop_list: str | None = None) -> Counter:
    return Counter(_tokens(text, stop_list))


def _overlap(r, g) -> tuple[int, int, int]:
    if isinstance(r, Counter) and isinstance(g, Counter):
        return sum((r & g).values()), sum(r.values()), sum(g.values())
    r, g = set(r), set(g)
    return len(r & g), len(r), len(g)


def precision_recall_f1(r, g) -> tuple[float, float, float]:
    """Token-overlap precision, recall and F1 of response ``r`` against ``g``.

    Both empty gives (1, 1, 1); exactly one empty gives (0, 0, 0).
    Pass two ``Counter`` objects for multiset overlap.
    """
    common, nr, ng = _overlap(r, g)
    if nr == 0 and ng == 0:
        return 1.0, 1.0, 1.0
    if nr == 0 or ng == 0:
        return 0.0, 0.0, 0.0
    p = common / nr
    rec = common / ng
    f1 = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
    return p, rec, f1


def faithfulness(r_text: str, g_text: str, *, multiset: bool = False,
                 stop_list: str | None = None) -> float:
    """Share of the response's tokens that also occur in the ground truth.

    An empty response scores 0, unless the ground truth is empty too (then 1).
    """
    if multiset:
        r, g = token_bag(r_text, stop_list), token_bag(g_text, stop_list)
    else:
        r, g = token_set(r_text, stop_list), token_set(g_text, stop_list)
    common, nr, ng = _overlap(r, g)
    if nr == 0:
        return 1.0 if ng == 0 else 0.0
    return common / nr


def tf_cosine(r_text: str, g_text: str, stop_list: str | None = None) -> float:
    """Cosine between term-frequency vectors of the two texts, in [0, 1].

    >>> tf_cosine("a a b", "a b b")
    0.8
    """
    rc, gc = token_bag(r_text, stop_list), token_bag(g_text, stop_list)
    if not rc and not gc:
        return 1.0
    if not rc or not gc:
        return 0.0
    dot = sum(c * gc[t] for t, c in rc.items())
    nr = sum(c * c for c in rc.values())
    ng = sum(c * c for c in gc.values())
    # integer arithmetic up to the single rounding in sqrt and the division
    return min(1.0, dot / math.sqrt(nr * ng))


def correctness(r_text: str, g_text: str, omega: float = DEFAULT_OMEGA, *,
                multiset: bool = False, stop_list: str | None = None,
                cosine: float | None = None) -> float:
    """``omega * cosine + (1 - omega) * f1``.

    ``cosine`` defaults to :func:`tf_cosine`; pass an embedding cosine to use
    that instead.
    """
    _check_omega(omega)
    if cosine is None:
        cosine = tf_cosine(r_text, g_text, stop_list)
    if multiset:
        _, _, f1 = precision_recall_f1(token_bag(r_text, stop_list), token_bag(g_text, stop_list))
    else:
        _, _, f1 = precision_recall_f1(token_set(r_text, stop_list), token_set(g_text, stop_list))
    return omega * cosine + (1 - omega) * f1


def _check_omega(omega) -> None:
    if isinstance(omega, bool) or not isinstance(omega, (int, float)) or not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be within [0, 1], got {omega!r}")


def semantic_similarity(r_text: str, g_text: str, embedder=None) -> float:
    """Cosine between the embeddings of response and ground truth, in [-1, 1]."""
    embedder = embedder if embedder is not None else HashingEmbedder()
    return cosine_similarity(embedder.embed(r_text), embedder.embed(g_text))


def relevancy(question: str | None, answer: str, embedder=None) -> float | None:
    """Cosine between question and answer embeddings; ``None`` without a question."""
    if not question:
        return None
    embedder = embedder if embedder is not None else HashingEmbedder()
    return cosine_similarity(embedder.embed(question), embedder.embed(answer))


# --- corpus evaluation --------------------------------------------------------


@dataclass(frozen=True)
class EvalPair:
    pair_id: str
    response: str
    ground_truth: str
    question: str | None = None


@dataclass(frozen=True)
class MetricScores:
    precision: float
    recall: float
    f1: float
    tf_cosine: float
    correctness: float
    faithfulness: float
    semantic_similarity: float
    relevancy: float | None
    omega: float

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if out["relevancy"] is None:
            del out["relevancy"]
        return out


@dataclass
class EvalConfig:
    omega: float = DEFAULT_OMEGA
    multiset: bool = False
    stop_list: str | None = None
    # "tf": correctness uses tf_cosine; "embedding": it uses semantic_similarity
    correctness_cosine: str = "tf"
    embedder: object = field(default_factory=HashingEmbedder)

    def __post_init__(self):
        _check_omega(self.omega)
        if self.correctness_cosine not in ("tf", "embedding"):
            raise ValueError(f"correctness_cosine must be 'tf' or 'embedding', got {self.correctness_cosine!r}")

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "multiset": self.multiset,
            "stop_list": self.stop_list,
            "correctness_cosine": self.correctness_cosine,
            "embedder": getattr(self.embedder, "provider_tag", type(self.embedder).__name__),
        }


def evaluate_pair(pair: EvalPair, config: EvalConfig | None = None) -> MetricScores:
    cfg = config or EvalConfig()
    bag = token_bag if cfg.multiset else token_set
    r = bag(pair.response, cfg.stop_list)
    g = bag(pair.ground_truth, cfg.stop_list)
    p, rec, f1 = precision_recall_f1(r, g)
    tfc = tf_cosine(pair.response, pair.ground_truth, cfg.stop_list)
    sem = semantic_similarity(pair.response, pair.ground_truth, cfg.embedder)
    cos = tfc if cfg.correctness_cosine == "tf" else sem
    return MetricScores(
        precision=p,
        recall=rec,
        f1=f1,
        tf_cosine=tfc,
        correctness=cfg.omega * cos + (1 - cfg.omega) * f1,
        faithfulness=faithfulness(pair.response, pair.ground_truth,
                                  multiset=cfg.multiset, stop_list=cfg.stop_list),
        semantic_similarity=sem,
        relevancy=relevancy(pair.question, pair.response, cfg.embedder),
        omega=cfg.omega,
    )


def aggregate(scores: list[MetricScores]) -> dict[str, dict[str, float]]:
    """Mean, median, min and max per metric, skipping absent values.

    ``math.fsum`` keeps the mean independent of pair order.
    """
    out = {}
    for name in METRICS:
        vals = sorted(v for v in (getattr(s, name) for s in scores) if v is not None)
        if not vals:
            continue
        out[name] = {
            "mean": math.fsum(vals) / len(vals),
            "median": statistics.median(vals),
            "min": vals[0],
            "max": vals[-1],
        }
    return out


@dataclass
class EvalReport:
    pairs: list[tuple[str, MetricScores]]
    aggregate: dict[str, dict[str, float]]
    config: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "count": len(self.pairs),
            "aggregate": self.aggregate,
            "pairs": [{"pair_id": pid, **s.to_dict()} for pid, s in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def evaluate_corpus(pairs, config: EvalConfig | None = None) -> EvalReport:
    cfg = config or EvalConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one pair")
    seen = set()
    for p in pairs:
        if p.pair_id in seen:
            raise ValueError(f"duplicate pair_id {p.pair_id!r}")
        seen.add(p.pair_id)
    scored = [(p.pair_id, evaluate_pair(p, cfg)) for p in pairs]
    return EvalReport(scored, aggregate([s for _, s in scored]), cfg.to_dict())


def load_eval_pairs(stream) -> list[EvalPair]:
    """Read JSON-lines pairs: ``pair_id``, ``response``, ``ground_truth``, optional ``question``."""
    if isinstance(stream, str):
        stream = stream.split("\n")
    out = []
    for n, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {n}: invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ValueError(f"line {n}: expected a JSON object")
        for key in ("pair_id", "response", "ground_truth"):
            if not isinstance(obj.get(key), str):
                raise ValueError(f"line {n}: field '{key}' must be a string")
        q = obj.get("question")
        if q is not None and not isinstance(q, str):
            raise ValueError(f"line {n}: field 'question' must be a string")
        out.append(EvalPair(obj["pair_id"], obj["response"], obj["ground_truth"], q))
    return out
