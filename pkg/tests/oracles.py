"""Independent reference implementations used as test oracles.

Nothing here imports the package under test.  Each function takes the most
direct route to its answer: a different formula, a character scan, a full sort.
"""

import math

R_KM = 6371.0


def law_of_cosines_km(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return R_KM * math.acos(max(-1.0, min(1.0, c)))


def scan_tokens(text):
    """Character-by-character tokenizer: alnum runs, simple per-character lowercase."""
    out, cur = [], []
    for ch in text:
        if ch.isalnum():
            low = ch.lower()
            cur.append(low[0])
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def set_overlap_scores(r_tokens, g_tokens):
    """Precision, recall, F1, faithfulness over distinct tokens by nested loops."""
    r_u, g_u = [], []
    for t in r_tokens:
        if t not in r_u:
            r_u.append(t)
    for t in g_tokens:
        if t not in g_u:
            g_u.append(t)
    common = 0
    for t in r_u:
        for u in g_u:
            if t == u:
                common += 1
                break
    if not r_u and not g_u:
        return 1.0, 1.0, 1.0, 1.0
    if not r_u:
        return 0.0, 0.0, 0.0, 0.0
    if not g_u:
        return 0.0, 0.0, 0.0, 0.0
    p = common / len(r_u)
    rec = common / len(g_u)
    f1 = 0.0 if common == 0 else 2 * p * rec / (p + rec)
    return p, rec, f1, common / len(r_u)


def tf_cosine_oracle(r_tokens, g_tokens):
    vocab = sorted(set(r_tokens) | set(g_tokens))
    rv = [r_tokens.count(w) for w in vocab]
    gv = [g_tokens.count(w) for w in vocab]
    nr = sum(x * x for x in rv)
    ng = sum(x * x for x in gv)
    if nr == 0 and ng == 0:
        return 1.0
    if nr == 0 or ng == 0:
        return 0.0
    return min(1.0, sum(a * b for a, b in zip(rv, gv)) / math.sqrt(nr * ng))


def topk_full_sort(vectors, query, k):
    """Indices of the k best cosine scores; ties resolved by insertion order."""
    qn = math.sqrt(sum(x * x for x in query))
    scored = []
    for i, v in enumerate(vectors):
        vn = math.sqrt(sum(x * x for x in v))
        s = 0.0 if vn == 0 or qn == 0 else sum(a * b for a, b in zip(v, query)) / (vn * qn)
        scored.append((-s, i))
    scored.sort()
    return [i for _, i in scored[:k]]


def vehicle_count(class_names, vehicle_classes=("car", "truck", "bus", "motorcycle", "bicycle")):
    n = 0
    for c in class_names:
        for v in vehicle_classes:
            if c == v:
                n += 1
    return n


WORDS = ("car", "Truck", "bus", "beam", "17", "array", "the", "LOS", "blocked", "road", "tx", "rx", "0", "x")
SEPS = (" ", ", ", ". ", "-", " – ", "\n", "_", ":")


def random_text(rng, max_words=12):
    """Short text over a small vocabulary so overlaps are frequent."""
    n = int(rng.integers(0, max_words + 1))
    out = []
    for _ in range(n):
        out.append(str(rng.choice(WORDS)))
        out.append(str(rng.choice(SEPS)))
    return "".join(out)


def hashed_cosine(a_tokens, b_tokens, dim=384, key=b"scene-rag/feature-hash/v1"):
    """Cosine of signed feature-hash count vectors, in integer arithmetic."""
    import hashlib

    def counts(tokens):
        c = {}
        for t in tokens:
            h = int.from_bytes(hashlib.blake2b(t.encode(), digest_size=8, key=key).digest(), "little")
            c[h % dim] = c.get(h % dim, 0) + (-1 if h >> 63 else 1)
        return c

    ca, cb = counts(a_tokens), counts(b_tokens)
    na = sum(v * v for v in ca.values())
    nb = sum(v * v for v in cb.values())
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * cb.get(k, 0) for k, v in ca.items()) / math.sqrt(na * nb)
