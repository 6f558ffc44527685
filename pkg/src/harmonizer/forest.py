"""Random-forest classifier from embeddings to cluster-label strings.

Serialized model layout (``model.bin``, little-endian)::

    b"CDEF1"
    u32 feature_dim, u32 n_classes
    n_classes x (u16 byte length, UTF-8 label)
    u32 n_trees
    per tree: u32 n_nodes, then arrays of n_nodes entries:
        i32 feature (-1 for a leaf), f64 threshold, i32 left, i32 right,
        u32 class counts (n_nodes x n_classes)

A sample goes to ``left`` when ``x[feature] <= threshold``.
"""
from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vecspace import as_array

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CDEF1"


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    seed: int = 42
    max_features: int | str = "sqrt"
    min_leaf: int = 1
    bootstrap: bool = True
    test_fraction: float = 0.2
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    def n_candidate_features(self, dim: int) -> int:
        if self.max_features == "sqrt":
            return max(1, math.isqrt(dim))
        return max(1, min(dim, int(self.max_features)))


@dataclass(frozen=True)
class LabeledSet:
    rows: np.ndarray
    labels: np.ndarray  # object array of strings
    index: np.ndarray  # positions in the original matrix

    def __len__(self) -> int:
        return len(self.labels)


def split_train_test(matrix, labels: Sequence[str], params: ForestParams = ForestParams()) -> tuple[LabeledSet, LabeledSet]:
    """Seeded, optionally stratified train/test split.

    Per class, ``round(n * test_fraction)`` rows go to test; singleton classes
    stay in train.
    """
    x = as_array(matrix)
    y = np.asarray(list(labels), dtype=object)
    if len(y) == 0:
        raise ValueError("cannot split an empty set")
    if len(y) != x.shape[0]:
        raise ValueError("labels and rows differ in length")
    rng = np.random.default_rng(params.seed)
    test_parts = []
    if params.stratified:
        for cls in sorted(set(y.tolist())):
            idx = np.flatnonzero(y == cls)
            idx = idx[rng.permutation(len(idx))]
            if len(idx) < 2:
                continue
            n_test = min(len(idx) - 1, int(math.floor(len(idx) * params.test_fraction + 0.5)))
            test_parts.append(idx[:n_test])
    else:
        perm = rng.permutation(len(y))
        test_parts.append(perm[: int(math.floor(len(y) * params.test_fraction + 0.5))])
    test_idx = np.sort(np.concatenate(test_parts)) if test_parts else np.empty(0, dtype=np.int64)
    mask = np.ones(len(y), dtype=bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask)
    return (
        LabeledSet(x[train_idx], y[train_idx], train_idx),
        LabeledSet(x[test_idx], y[test_idx], test_idx),
    )


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # n_nodes x n_classes
    sample_index: np.ndarray | None = None  # rows of the original matrix used to grow it

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = x[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, i.e. the earliest class in class order
        return self.counts[self.apply(x)].argmax(axis=1)


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int, features: np.ndarray, n_wanted: int, min_leaf: int):
    """Lowest weighted Gini split over the first ``n_wanted`` non-constant candidate features."""
    n = len(y)
    best = (math.inf, -1, 0.0)
    tried = 0
    onehot = np.zeros((n, n_classes))
    for f in features:
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        if xs[0] == xs[-1]:
            continue
        tried += 1
        onehot[:] = 0
        onehot[np.arange(n), y[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        right = left[-1] + onehot[-1] - left
        valid = (xs[1:] != xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if valid.any():
            gini_l = n_left - (left * left).sum(1) / n_left
            gini_r = n_right - (right * right).sum(1) / n_right
            cost = np.where(valid, gini_l + gini_r, np.inf)  # n * weighted gini
            k = int(np.argmin(cost))
            if cost[k] < best[0]:
                best = (float(cost[k]), int(f), (xs[k] + xs[k + 1]) / 2.0)
        if tried >= n_wanted:
            break
    return best


def grow_tree(x: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams, rng: np.random.Generator) -> Tree:
    dim = x.shape[1]
    n_wanted = params.n_candidate_features(dim)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) < 2 * params.min_leaf or np.count_nonzero(counts[node]) <= 1:
            continue
        features = rng.permutation(dim)
        cost, f, t = _best_split(x[idx], y[idx], n_classes, features, n_wanted, params.min_leaf)
        if f < 0:
            continue
        go_left = x[idx, f] <= t
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, t
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.int64),
    )


@dataclass
class ForestModel:
    trees: list[Tree]
    classes: tuple[str, ...]
    feature_dim: int

    def vote_counts(self, rows, n_jobs: int = 1) -> np.ndarray:
        x = as_array(rows)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected rows of dimension {self.feature_dim}, got shape {x.shape}")
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                preds = list(pool.map(lambda t: t.predict_index(x), self.trees))
        else:
            preds = [t.predict_index(x) for t in self.trees]
        votes = np.zeros((x.shape[0], len(self.classes)), dtype=np.int64)
        for p in preds:  # fixed tree order
            votes[np.arange(x.shape[0]), p] += 1
        return votes

    def predict(self, rows, n_jobs: int = 1) -> list[str]:
        return predict(self, rows, n_jobs)


def train_forest(train: LabeledSet, params: ForestParams = ForestParams(), n_jobs: int = 1) -> ForestModel:
    """Grow ``n_trees`` Gini trees; tree ``t`` draws from ``default_rng(seed ^ t)``."""
    x = np.asarray(train.rows, dtype=np.float64)
    classes = tuple(sorted(set(train.labels.tolist())))
    if len(train) == 0:
        raise ValueError("empty training set")
    if len(classes) == 1:
        logger.warning("training set has a single class %r; the model will always predict it", classes[0])
    class_index = {c: k for k, c in enumerate(classes)}
    y = np.array([class_index[c] for c in train.labels], dtype=np.int64)
    n = len(y)

    def one(t: int) -> Tree:
        rng = np.random.default_rng(params.seed ^ t)
        sample = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
        tree = grow_tree(x[sample], y[sample], len(classes), params, rng)
        tree.sample_index = np.asarray(train.index)[sample]
        return tree

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(t) for t in range(params.n_trees)]
    return ForestModel(trees, classes, x.shape[1])


def predict(model: ForestModel, rows, n_jobs: int = 1) -> list[str]:
    """Majority vote across trees; ties go to the earlier class in ``model.classes``."""
    votes = model.vote_counts(rows, n_jobs)
    return [model.classes[k] for k in votes.argmax(axis=1)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassReport:
    per_class: dict[str, ClassScores]
    accuracy: float
    macro: ClassScores
    weighted: ClassScores

    def format(self, digits: int = 2) -> str:
        names = list(self.per_class) + ["macro avg", "weighted avg"]
        width = max(len("weighted avg"), *(len(n) for n in names))
        head = f"{'':>{width}} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}"
        lines = [head, ""]
        row = "{:>{w}} {:>9.{d}f} {:>9.{d}f} {:>9.{d}f} {:>9}"
        for name, s in self.per_class.items():
            lines.append(row.format(name, s.precision, s.recall, s.f1, s.support, w=width, d=digits))
        lines.append("")
        total = self.macro.support
        lines.append(f"{'accuracy':>{width}} {'':>9} {'':>9} {self.accuracy:>9.{digits}f} {total:>9}")
        for name, s in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(row.format(name, s.precision, s.recall, s.f1, s.support, w=width, d=digits))
        return "\n".join(lines) + "\n"


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def classification_report(truth: Sequence[str], pred: Sequence[str]) -> ClassReport:
    truth = list(truth)
    pred = list(pred)
    if len(truth) != len(pred):
        raise ValueError(f"length mismatch: {len(truth)} vs {len(pred)}")
    if not truth:
        raise ValueError("empty label vectors")
    classes = sorted(set(truth) | set(pred))
    per_class = {}
    for c in classes:
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        # harmonic mean of precision and recall, from integers so it rounds once
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        per_class[c] = ClassScores(precision, recall, f1, tp + fn)
    n = len(truth)
    accuracy = sum(1 for t, p in zip(truth, pred) if t == p) / n
    scores = list(per_class.values())
    macro = ClassScores(
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
        n,
    )
    weighted = ClassScores(
        sum(s.precision * s.support for s in scores) / n,
        sum(s.recall * s.support for s in scores) / n,
        sum(s.f1 * s.support for s in scores) / n,
        n,
    )
    return ClassReport(per_class, accuracy, macro, weighted)


# ---------------------------------------------------------------------------
# serialization


def dump_model(model: ForestModel) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<II", model.feature_dim, len(model.classes))]
    for c in model.classes:
        raw = c.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<I", len(model.trees)))
    for t in model.trees:
        out.append(struct.pack("<I", len(t.feature)))
        out.append(t.feature.astype("<i4").tobytes())
        out.append(t.threshold.astype("<f8").tobytes())
        out.append(t.left.astype("<i4").tobytes())
        out.append(t.right.astype("<i4").tobytes())
        out.append(t.counts.astype("<u4").tobytes())
    return b"".join(out)


def load_model(data: bytes) -> ForestModel:
    if data[:4] != MODEL_MAGIC[:4]:
        raise ModelFormatError("not a forest model file")
    if data[:5] != MODEL_MAGIC:
        raise ModelFormatError(f"unsupported model version {data[4:5]!r}")
    pos = 5
    dim, n_classes = struct.unpack_from("<II", data, pos)
    pos += 8
    classes = []
    for _ in range(n_classes):
        (k,) = struct.unpack_from("<H", data, pos)
        pos += 2
        classes.append(data[pos : pos + k].decode("utf-8"))
        pos += k
    (n_trees,) = struct.unpack_from("<I", data, pos)
    pos += 4
    trees = []

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    for _ in range(n_trees):
        (m,) = struct.unpack_from("<I", data, pos)
        pos += 4
        feature = take("<i4", m).astype(np.int64)
        threshold = take("<f8", m).astype(np.float64)
        left = take("<i4", m).astype(np.int64)
        right = take("<i4", m).astype(np.int64)
        counts = take("<u4", m * n_classes).astype(np.int64).reshape(m, n_classes)
        trees.append(Tree(feature, threshold, left, right, counts))
    if pos != len(data):
        raise ModelFormatError("trailing bytes in model file")
    return ForestModel(trees, tuple(classes), dim)
