"""Hierarchical navigable small-world (HNSW) graph for approximate cosine search.

The graph lives in flat numpy arrays so that the insert and search loops can be
compiled with numba.  Rows are L2-normalised on the way in, so cosine distance
reduces to ``1 - dot``.  Insertion order and the level RNG are the only sources
of variation: the same vectors added in the same order with the same
``random_state`` always produce the same graph, whether added in one call or
in several.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from scene_rag._validation import check_matrix

_MAX_LEVEL = 16


# --- compiled kernels -------------------------------------------------------


@njit(cache=True, inline="always")
def _dist(data, i, q):
    return np.float32(1.0) - np.dot(data[i], q)


@njit(cache=True, inline="always")
def _heap_push(keys, vals, size, k, v):
    i = size
    keys[i] = k
    vals[i] = v
    while i > 0:
        parent = (i - 1) >> 1
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@njit(cache=True, inline="always")
def _heap_pop(keys, vals, size):
    k = keys[0]
    v = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            child = left + 1
        if keys[i] <= keys[child]:
            break
        keys[child], keys[i] = keys[i], keys[child]
        vals[child], vals[i] = vals[i], vals[child]
        i = child
    return k, v, size


@njit(cache=True)
def _neighbors(layer, node, nbr0, cnt0, urow, nbr_up, cnt_up):
    if layer == 0:
        return nbr0[node, : cnt0[node]]
    r = urow[node]
    return nbr_up[r, layer - 1, : cnt_up[r, layer - 1]]


@njit(cache=True)
def _greedy(q, cur, top, bottom, data, nbr0, cnt0, urow, nbr_up, cnt_up):
    # ef=1 descent from layer `top` down to `bottom` (exclusive)
    cur_d = _dist(data, cur, q)
    for layer in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            nb = _neighbors(layer, cur, nbr0, cnt0, urow, nbr_up, cnt_up)
            for j in range(nb.shape[0]):
                n = nb[j]
                d = _dist(data, n, q)
                if d < cur_d:
                    cur_d = d
                    cur = n
                    changed = True
    return cur


@njit(cache=True)
def _search_layer(q, entry, n_entry, ef, layer, data, nbr0, cnt0, urow,
                  nbr_up, cnt_up, visited, tag, cand_k, cand_v, res_k, res_v,
                  out_d, out_i):
    # candidates: min-heap on distance; results: max-heap via negated keys
    csize = 0
    rsize = 0
    for j in range(n_entry):
        e = entry[j]
        if visited[e] == tag:
            continue
        visited[e] = tag
        d = _dist(data, e, q)
        csize = _heap_push(cand_k, cand_v, csize, d, e)
        rsize = _heap_push(res_k, res_v, rsize, -d, e)
        if rsize > ef:
            _, _, rsize = _heap_pop(res_k, res_v, rsize)
    while csize > 0:
        d, c, csize = _heap_pop(cand_k, cand_v, csize)
        if rsize >= ef and d > -res_k[0]:
            break
        nb = _neighbors(layer, c, nbr0, cnt0, urow, nbr_up, cnt_up)
        for j in range(nb.shape[0]):
            n = nb[j]
            if visited[n] == tag:
                continue
            visited[n] = tag
            dn = _dist(data, n, q)
            if rsize < ef or dn < -res_k[0]:
                csize = _heap_push(cand_k, cand_v, csize, dn, n)
                rsize = _heap_push(res_k, res_v, rsize, -dn, n)
                if rsize > ef:
                    _, _, rsize = _heap_pop(res_k, res_v, rsize)
    count = rsize
    for j in range(count - 1, -1, -1):
        k, v, rsize = _heap_pop(res_k, res_v, rsize)
        out_d[j] = -k
        out_i[j] = v
    return count


@njit(cache=True)
def _select(base_d, ids, count, m, data, out):
    # keep a candidate only if it is closer to the base than to every kept one
    ns = 0
    for i in range(count):
        if ns >= m:
            break
        e = ids[i]
        keep = True
        for j in range(ns):
            if _dist(data, e, data[out[j]]) < base_d[i]:
                keep = False
                break
        if keep:
            out[ns] = e
            ns += 1
    return ns


@njit(cache=True)
def _link(src, dst, layer, m_max, data, nbr0, cnt0, urow, nbr_up, cnt_up,
          tmp_d, tmp_i, sel):
    if layer == 0:
        row = nbr0[src]
        cnt = cnt0[src]
    else:
        r = urow[src]
        row = nbr_up[r, layer - 1]
        cnt = cnt_up[r, layer - 1]
    if cnt < m_max:
        row[cnt] = dst
        cnt += 1
    else:
        base = data[src]
        for j in range(cnt):
            tmp_i[j] = row[j]
            tmp_d[j] = _dist(data, row[j], base)
        tmp_i[cnt] = dst
        tmp_d[cnt] = _dist(data, dst, base)
        order = np.argsort(tmp_d[: cnt + 1], kind="mergesort")
        sd = tmp_d[: cnt + 1][order]
        si = tmp_i[: cnt + 1][order]
        cnt = _select(sd, si, cnt + 1, m_max, data, sel)
        for j in range(cnt):
            row[j] = sel[j]
    if layer == 0:
        cnt0[src] = cnt
    else:
        cnt_up[urow[src], layer - 1] = cnt


@njit(cache=True)
def _insert_range(start, stop, data, levels, nbr0, cnt0, urow, nbr_up, cnt_up,
                  state, visited, m, m0, ef_c, cand_k, cand_v, res_k, res_v,
                  out_d, out_i, entry, tmp_d, tmp_i, sel):
    for x in range(start, stop):
        lvl = levels[x]
        ep = state[0]
        max_lvl = state[1]
        if ep < 0:
            state[0] = x
            state[1] = lvl
            continue
        q = data[x]
        cur = _greedy(q, ep, max_lvl, lvl, data, nbr0, cnt0, urow, nbr_up, cnt_up)
        entry[0] = cur
        n_entry = 1
        for layer in range(min(lvl, max_lvl), -1, -1):
            state[2] += 1
            count = _search_layer(q, entry, n_entry, ef_c, layer, data, nbr0,
                                  cnt0, urow, nbr_up, cnt_up, visited, state[2],
                                  cand_k, cand_v, res_k, res_v, out_d, out_i)
            ns = _select(out_d, out_i, count, m, data, sel)
            if layer == 0:
                for j in range(ns):
                    nbr0[x, j] = sel[j]
                cnt0[x] = ns
            else:
                r = urow[x]
                for j in range(ns):
                    nbr_up[r, layer - 1, j] = sel[j]
                cnt_up[r, layer - 1] = ns
            chosen = sel[:ns].copy()
            m_max = m0 if layer == 0 else m
            for j in range(ns):
                _link(chosen[j], x, layer, m_max, data, nbr0, cnt0, urow,
                      nbr_up, cnt_up, tmp_d, tmp_i, sel)
            for j in range(count):
                entry[j] = out_i[j]
            n_entry = count
        if lvl > max_lvl:
            state[0] = x
            state[1] = lvl


@njit(cache=True)
def _query(q, k, ef, data, nbr0, cnt0, urow, nbr_up, cnt_up, state, visited,
           cand_k, cand_v, res_k, res_v, out_d, out_i, entry):
    cur = _greedy(q, state[0], state[1], 0, data, nbr0, cnt0, urow, nbr_up, cnt_up)
    entry[0] = cur
    state[2] += 1
    count = _search_layer(q, entry, 1, ef, 0, data, nbr0, cnt0, urow, nbr_up,
                          cnt_up, visited, state[2], cand_k, cand_v, res_k,
                          res_v, out_d, out_i)
    return min(count, k)


# --- estimator --------------------------------------------------------------


class HNSWIndex(BaseEstimator):
    """Approximate nearest neighbours under cosine distance.

    Parameters
    ----------
    M : int, default=16
        Links per node on the upper layers; layer 0 keeps ``2 * M``.
    ef_construction : int, default=200
        Beam width while inserting.
    ef_search : int, default=800
        Beam width while querying (raised to ``n_neighbors`` when smaller).
        Unstructured 384-d data needs a wide beam: at 64 recall@10 on 10k
        random unit vectors is near 0.4, at 800 it is above 0.95.
    random_state : int, default=0
        Seed for the level assignment.
    """

    def __init__(self, M=16, ef_construction=200, ef_search=800, random_state=0):
        self.M = M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.random_state = random_state

    def _check_params(self):
        if int(self.M) < 2:
            raise ValueError(f"M must be >= 2, got {self.M!r}")
        if int(self.ef_construction) < 1 or int(self.ef_search) < 1:
            raise ValueError("ef_construction and ef_search must be >= 1")

    def _reset(self, dim):
        self._check_params()
        m = int(self.M)
        self.n_features_in_ = dim
        self.n_samples_ = 0
        self._rng = np.random.default_rng(self.random_state)
        self._ml = 1.0 / math.log(m)
        self._data = np.zeros((0, dim), dtype=np.float32)
        self._levels = np.zeros(0, dtype=np.int32)
        self._nbr0 = np.zeros((0, 2 * m), dtype=np.int32)
        self._cnt0 = np.zeros(0, dtype=np.int32)
        self._urow = np.zeros(0, dtype=np.int32)
        self._nbr_up = np.zeros((0, _MAX_LEVEL, m), dtype=np.int32)
        self._cnt_up = np.zeros((0, _MAX_LEVEL), dtype=np.int32)
        self._n_up = 0
        self._visited = np.zeros(0, dtype=np.int32)
        # entry point, top level, visit tag
        self._state = np.array([-1, -1, 0], dtype=np.int64)

    def fit(self, X, y=None):
        """Build the graph from scratch over the rows of ``X``."""
        X = check_matrix(X)
        self._reset(X.shape[1])
        return self._add(X)

    def partial_fit(self, X, y=None):
        """Insert more rows, continuing the existing graph."""
        X = check_matrix(X)
        if not hasattr(self, "n_samples_"):
            self._reset(X.shape[1])
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, index expects {self.n_features_in_}"
            )
        return self._add(X)

    def _grow(self, n_new, levels):
        n_old = self.n_samples_
        n = n_old + n_new
        m = int(self.M)
        if n > self._data.shape[0]:
            cap = max(n, 2 * self._data.shape[0], 64)

            def grow(a, fill=0):
                out = np.full((cap,) + a.shape[1:], fill, dtype=a.dtype)
                out[: a.shape[0]] = a
                return out

            self._data = grow(self._data)
            self._levels = grow(self._levels)
            self._nbr0 = grow(self._nbr0)
            self._cnt0 = grow(self._cnt0)
            self._urow = grow(self._urow, -1)
            self._visited = grow(self._visited)
        self._levels[n_old:n] = levels
        upper = np.flatnonzero(levels > 0)
        need = self._n_up + upper.size
        if need > self._nbr_up.shape[0]:
            cap = max(need, 2 * self._nbr_up.shape[0], 16)
            nbr_up = np.zeros((cap, _MAX_LEVEL, m), dtype=np.int32)
            cnt_up = np.zeros((cap, _MAX_LEVEL), dtype=np.int32)
            nbr_up[: self._n_up] = self._nbr_up[: self._n_up]
            cnt_up[: self._n_up] = self._cnt_up[: self._n_up]
            self._nbr_up, self._cnt_up = nbr_up, cnt_up
        self._urow[n_old + upper] = np.arange(self._n_up, need, dtype=np.int32)
        self._n_up = need

    def _buffers(self, ef):
        cap = max(self._data.shape[0], 1)
        width = max(ef, 2 * int(self.M)) + 2
        return (
            np.empty(cap + 1, dtype=np.float32),
            np.empty(cap + 1, dtype=np.int32),
            np.empty(width, dtype=np.float32),
            np.empty(width, dtype=np.int32),
            np.empty(width, dtype=np.float32),
            np.empty(width, dtype=np.int32),
            np.empty(width, dtype=np.int32),
        )

    def _add(self, X):
        n_new = X.shape[0]
        if n_new == 0:
            return self
        u = 1.0 - self._rng.random(n_new)
        levels = np.minimum(
            np.floor(-np.log(u) * self._ml), _MAX_LEVEL
        ).astype(np.int32)
        start = self.n_samples_
        self._grow(n_new, levels)
        rows = np.array(X, dtype=np.float32)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        np.divide(rows, norms, out=rows, where=norms > 0)
        self._data[start : start + n_new] = rows
        m = int(self.M)
        ef_c = max(int(self.ef_construction), m)
        cand_k, cand_v, res_k, res_v, out_d, out_i, entry = self._buffers(ef_c)
        tmp_d = np.empty(2 * m + 1, dtype=np.float32)
        tmp_i = np.empty(2 * m + 1, dtype=np.int32)
        sel = np.empty(2 * m + 1, dtype=np.int32)
        _insert_range(
            start, start + n_new, self._data, self._levels, self._nbr0,
            self._cnt0, self._urow, self._nbr_up, self._cnt_up, self._state,
            self._visited, m, 2 * m, ef_c, cand_k, cand_v, res_k, res_v,
            out_d, out_i, entry, tmp_d, tmp_i, sel,
        )
        self.n_samples_ = start + n_new
        return self

    def kneighbors(self, X, n_neighbors=10):
        """Return ``(distances, indices)`` of approximate nearest rows.

        Distances are cosine distances in float32.  Rows of the result are
        padded with ``-1`` / ``inf`` when fewer than ``n_neighbors`` points
        were reached.
        """
        check_is_fitted(self, "n_samples_")
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, index expects {self.n_features_in_}"
            )
        k = int(n_neighbors)
        if k < 1:
            raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors!r}")
        dist = np.full((X.shape[0], k), np.inf, dtype=np.float32)
        idx = np.full((X.shape[0], k), -1, dtype=np.int64)
        if self.n_samples_ == 0:
            return dist, idx
        ef = max(int(self.ef_search), k)
        cand_k, cand_v, res_k, res_v, out_d, out_i, entry = self._buffers(ef)
        Q = np.asarray(X, dtype=np.float32)
        for r in range(Q.shape[0]):
            q = Q[r]
            nrm = float(np.linalg.norm(q))
            q = np.ascontiguousarray(q / nrm if nrm > 0 else q, dtype=np.float32)
            count = _query(
                q, k, ef, self._data, self._nbr0, self._cnt0, self._urow,
                self._nbr_up, self._cnt_up, self._state, self._visited,
                cand_k, cand_v, res_k, res_v, out_d, out_i, entry,
            )
            dist[r, :count] = out_d[:count]
            idx[r, :count] = out_i[:count]
        return dist, idx

    def candidates(self, q, n_candidates):
        """Indices reached by a single query's layer-0 beam, best first."""
        _, idx = self.kneighbors(np.asarray(q).reshape(1, -1), n_candidates)
        row = idx[0]
        return row[row >= 0]
