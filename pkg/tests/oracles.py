"""Brute-force reference implementations used by the tests.

These follow the textbook definitions directly (dense matrices from scipy,
explicit loops) and share no code with the package. The single-linkage
oracle takes a distance matrix, so callers may build it with the package's
kernel when bitwise equality of merge heights is the point of the test.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def distance_matrix(x: np.ndarray, metric: str) -> np.ndarray:
    from scipy.spatial.distance import cdist

    d = cdist(x, x, metric="euclidean" if metric == "euclidean" else "cosine")
    np.fill_diagonal(d, 0.0)
    return d


def silhouette(x, labels, metric="euclidean") -> float:
    d = distance_matrix(np.asarray(x, dtype=float), metric)
    labels = np.asarray(labels)
    clusters = sorted(set(labels.tolist()))
    scores = []
    for i in range(len(labels)):
        own = labels == labels[i]
        own[i] = False
        if not own.any():
            scores.append(0.0)  # singleton
            continue
        a = d[i, own].mean()
        b = min(d[i, labels == c].mean() for c in clusters if c != labels[i])
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(scores))


def dunn(x, labels, metric="euclidean") -> float:
    d = distance_matrix(np.asarray(x, dtype=float), metric)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    sep = d[~same].min()
    diam = d[same].max()
    return math.inf if diam == 0 else float(sep / diam)


def davies_bouldin(x, labels, metric="euclidean") -> float:
    x = np.asarray(x, dtype=float)
    if metric == "cosine":
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    labels = np.asarray(labels)
    clusters = sorted(set(labels.tolist()))

    def dist(u, v):
        if metric == "euclidean":
            return math.sqrt(float(((u - v) ** 2).sum()))
        return 1.0 - float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))

    cents = {c: x[labels == c].mean(0) for c in clusters}
    scat = {c: np.mean([dist(p, cents[c]) for p in x[labels == c]]) for c in clusters}
    worst = []
    for i in clusters:
        worst.append(max((scat[i] + scat[j]) / dist(cents[i], cents[j]) for j in clusters if j != i))
    return sum(worst) / len(worst)


def ari(truth, pred) -> float:
    """Pair counting over all unordered pairs."""
    n = len(truth)
    pairs = list(itertools.combinations(range(n), 2))
    same_t = [truth[i] == truth[j] for i, j in pairs]
    same_p = [pred[i] == pred[j] for i, j in pairs]
    index = sum(a and b for a, b in zip(same_t, same_p))
    a_sum, b_sum, total = sum(same_t), sum(same_p), len(pairs)
    expected = a_sum * b_sum / total
    maximum = (a_sum + b_sum) / 2
    if maximum == expected:
        return 1.0 if _same_partition(truth, pred) else 0.0
    return (index - expected) / (maximum - expected)


def _same_partition(a, b) -> bool:
    n = len(a)
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(n) for j in range(n))


def nmi(truth, pred) -> float:
    n = len(truth)
    ct, cp = {}, {}
    joint = {}
    for t, p in zip(truth, pred):
        ct[t] = ct.get(t, 0) + 1
        cp[p] = cp.get(p, 0) + 1
        joint[t, p] = joint.get((t, p), 0) + 1
    if len(ct) == 1 and len(cp) == 1:
        return 1.0
    h_t = -sum(c / n * math.log(c / n) for c in ct.values())
    h_p = -sum(c / n * math.log(c / n) for c in cp.values())
    mi = sum(c / n * math.log(n * c / (ct[t] * cp[p])) for (t, p), c in joint.items())
    norm = (h_t + h_p) / 2
    return 0.0 if norm == 0 else mi / norm


def partitions(n: int, max_blocks: int):
    """All set partitions of range(n) into at most ``max_blocks`` blocks (restricted growth strings)."""
    def rec(prefix, top):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for b in range(min(top + 2, max_blocks)):
            yield from rec(prefix + [b], max(top, b))

    if n == 0:
        yield ()
        return
    yield from rec([0], 0)


def single_linkage_heights(dist: np.ndarray) -> list[float]:
    """Naive O(n^3) agglomeration: merge the closest pair, min-update the rows."""
    n = len(dist)
    d = dist.astype(float).copy()
    np.fill_diagonal(d, np.inf)
    alive = list(range(n))
    heights = []
    for _ in range(n - 1):
        best = (math.inf, -1, -1)
        for a in alive:
            for b in alive:
                if a < b and d[a, b] < best[0]:
                    best = (d[a, b], a, b)
        h, a, b = best
        heights.append(h)
        for c in alive:
            d[a, c] = d[c, a] = min(d[a, c], d[b, c])
        d[a, a] = np.inf
        alive.remove(b)
    return heights


def mutual_reachability_matrix(dist: np.ndarray, min_samples: int) -> np.ndarray:
    n = len(dist)
    core = np.array([sorted(dist[i, j] for j in range(n) if j != i)[min_samples - 1] for i in range(n)])
    mr = np.empty_like(dist)
    for i in range(n):
        for j in range(n):
            mr[i, j] = max(core[i], core[j], dist[i, j])
    return mr


def mst_weight(w: np.ndarray) -> float:
    """Kruskal over the dense matrix."""
    n = len(w)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    total = 0.0
    for wt, i, j in sorted((w[i, j], i, j) for i in range(n) for j in range(i + 1, n)):
        a, b = find(i), find(j)
        if a != b:
            parent[a] = b
            total += wt
    return total


class PartitionTable:
    """Brute-force ARI/NMI for many partitions of the same ``n`` points.

    Each partition is stored as a bitmask over the ``n(n-1)/2`` point pairs
    (set when both points share a block) and as one membership bitmask per
    block. Pair agreement is then a popcount of an AND, and every contingency
    cell is the popcount of two block masks intersected.
    """

    def __init__(self, parts):
        self.parts = [tuple(p) for p in parts]
        n = len(self.parts[0])
        self.n = n
        pairs = list(itertools.combinations(range(n), 2))
        self.total = len(pairs)
        self.same = []
        self.blocks = []
        self.entropy = []
        for p in self.parts:
            self.same.append(sum(1 << k for k, (i, j) in enumerate(pairs) if p[i] == p[j]))
            masks = {}
            for i, b in enumerate(p):
                masks[b] = masks.get(b, 0) | (1 << i)
            self.blocks.append(list(masks.values()))
            sizes = [m.bit_count() for m in masks.values()]
            self.entropy.append(-sum(c / n * math.log(c / n) for c in sizes))

    def ari(self, i: int, j: int) -> float:
        a, b = self.same[i], self.same[j]
        index = (a & b).bit_count()
        a_sum, b_sum = a.bit_count(), b.bit_count()
        expected = a_sum * b_sum / self.total
        maximum = (a_sum + b_sum) / 2
        if maximum == expected:
            return 1.0 if a == b else 0.0
        return (index - expected) / (maximum - expected)

    def nmi(self, i: int, j: int) -> float:
        if self.same[i] == self.same[j]:
            return 1.0
        n = self.n
        mi = 0.0
        for bt in self.blocks[i]:
            st = bt.bit_count()
            for bp in self.blocks[j]:
                c = (bt & bp).bit_count()
                if c:
                    mi += c / n * math.log(n * c / (st * bp.bit_count()))
        norm = (self.entropy[i] + self.entropy[j]) / 2
        return 0.0 if norm == 0 else mi / norm
