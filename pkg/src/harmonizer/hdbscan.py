"""HDBSCAN over cosine distance.

Stages: core distances -> mutual reachability -> Prim MST (streamed rows, O(N)
memory) -> single-linkage dendrogram -> condensed tree -> cluster selection.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .vecspace import distance_row, unit_rows

# lambda = 1 / distance; zero distances (duplicate points) are floored so
# stabilities stay finite.
MIN_DISTANCE = 1e-12


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class HdbscanParams:
    min_cluster_size: int = 20
    min_samples: int | None = None
    cluster_selection: Literal["excess_of_mass", "leaf"] = "excess_of_mass"

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ParameterError("min_cluster_size must be >= 2")
        if self.min_samples is not None and self.min_samples < 1:
            raise ParameterError("min_samples must be >= 1")
        if self.cluster_selection not in ("excess_of_mass", "leaf"):
            raise ParameterError(f"unknown cluster_selection {self.cluster_selection!r}")

    @property
    def effective_min_samples(self) -> int:
        return self.min_cluster_size if self.min_samples is None else self.min_samples


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    probabilities: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def n_outliers(self) -> int:
        return int((self.labels == -1).sum())

    def __len__(self) -> int:
        return len(self.labels)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


class Edge(NamedTuple):
    i: int
    j: int
    weight: float


@dataclass
class CondensedTree:
    """Rows ``(parent, child, lambda_val, child_size)``.

    Points are ids ``0..N-1``; cluster nodes start at ``N`` (the root).
    """

    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int
    stabilities: dict[int, float] = field(default_factory=dict)
    birth: dict[int, float] = field(default_factory=dict)
    selected: list[int] = field(default_factory=list)

    @property
    def root(self) -> int:
        return self.n_points

    def cluster_nodes(self) -> list[int]:
        return [self.root] + [int(c) for c, s in zip(self.child, self.child_size) if c >= self.n_points]

    def to_json(self) -> dict:
        return {
            "n_points": self.n_points,
            "nodes": [
                {"parent": int(p), "child": int(c), "lambda_val": float(lv), "child_size": int(s)}
                for p, c, lv, s in zip(self.parent, self.child, self.lambda_val, self.child_size)
            ],
            "stabilities": {str(k): v for k, v in sorted(self.stabilities.items())},
            "selected": list(self.selected),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


# ---------------------------------------------------------------------------


def core_distances(matrix, min_samples: int, *, unit: np.ndarray | None = None) -> np.ndarray:
    """Distance from each point to its ``min_samples``-th nearest other point."""
    unit = unit_rows(matrix) if unit is None else unit
    n = unit.shape[0]
    if min_samples < 1 or min_samples >= n:
        raise ParameterError(f"min_samples={min_samples} requires 1 <= min_samples < N={n}")
    core = np.empty(n)
    for i in range(n):
        d = distance_row(unit, i)
        d[i] = np.inf
        core[i] = np.partition(d, min_samples - 1)[min_samples - 1]
    return core


def mutual_reachability(d_ij: float, core_i: float, core_j: float) -> float:
    return max(core_i, core_j, d_ij)


def build_mst(matrix, core: np.ndarray, *, unit: np.ndarray | None = None) -> list[Edge]:
    """Prim's algorithm over mutual reachability, streaming one distance row per step.

    Returns N-1 edges with ``i < j``, sorted by (weight, i, j).
    """
    unit = unit_rows(matrix) if unit is None else unit
    n = unit.shape[0]
    if n < 2:
        raise ParameterError("MST needs at least 2 points")
    core = np.asarray(core, dtype=np.float64)

    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.full(n, -1, dtype=np.int64)
    edges: list[Edge] = []
    current = 0
    for _ in range(n - 1):
        in_tree[current] = True
        mr = np.maximum(distance_row(unit, current), core)
        np.maximum(mr, core[current], out=mr)
        improve = (mr < best) & ~in_tree
        best[improve] = mr[improve]
        best_from[improve] = current
        candidates = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidates))  # lowest index wins ties
        a, b = sorted((int(best_from[nxt]), nxt))
        edges.append(Edge(a, b, float(best[nxt])))
        current = nxt
    edges.sort(key=lambda e: (e.weight, e.i, e.j))
    return edges


# ---------------------------------------------------------------------------
# dendrogram + condensed tree


def single_linkage(mst: Sequence[Edge], n_points: int | None = None) -> np.ndarray:
    """Merge table ``(left, right, distance, size)`` in scipy linkage layout."""
    n = len(mst) + 1 if n_points is None else n_points
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    out = np.zeros((len(mst), 4))
    for k, (i, j, w) in enumerate(sorted(mst, key=lambda e: (e[2], min(e[0], e[1]), max(e[0], e[1])))):
        a, b = find(i), find(j)
        new = n + k
        parent[a] = parent[b] = new
        size[new] = size[a] + size[b]
        out[k] = (min(a, b), max(a, b), w, size[new])
    return out


def _lambda(distance: float) -> float:
    return 1.0 / max(distance, MIN_DISTANCE)


def _multiway_children(linkage: np.ndarray, n: int) -> dict[int, list[int]]:
    """Children of each dendrogram node with equal-height merges collapsed.

    Mutual reachability produces many tied weights, and the binary merge
    order among ties depends on row order. Merging all nodes of one height
    into a single multi-way split makes the hierarchy a function of the
    distance values alone, so the clustering is invariant to row permutation.
    """
    kids: dict[int, list[int]] = {}
    for k in range(linkage.shape[0]):
        node = n + k
        height = linkage[k, 2]
        out = []
        for c in (int(linkage[k, 0]), int(linkage[k, 1])):
            if c >= n and linkage[c - n, 2] == height:
                out.extend(kids.pop(c))
            else:
                out.append(c)
        kids[node] = out
    return kids


def condense_tree(linkage: np.ndarray, min_cluster_size: int) -> CondensedTree:
    n = linkage.shape[0] + 1
    root = 2 * n - 2
    kids = _multiway_children(linkage, n)

    def count(node):
        return 1 if node < n else int(linkage[node - n, 3])

    def points_under(node):
        stack, out = [node], []
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.extend(kids[x])
        return out

    rows: list[tuple[int, int, float, int]] = []
    next_label = n + 1
    # (dendrogram node, condensed cluster label)
    stack = [(root, n)]
    while stack:
        node, label = stack.pop()
        if node < n:  # unreachable for min_cluster_size >= 2; points leave via points_under
            continue
        lam = _lambda(linkage[node - n, 2])
        children = kids[node]
        big = [c for c in children if count(c) >= min_cluster_size]
        for c in children:
            if c not in big:
                rows.extend((label, p, lam, 1) for p in points_under(c))
        if len(big) >= 2:
            for sub in big:
                rows.append((label, next_label, lam, count(sub)))
                stack.append((sub, next_label))
                next_label += 1
        elif big:
            stack.append((big[0], label))

    rows.sort(key=lambda r: (r[0], r[1]))
    return CondensedTree(
        parent=np.array([r[0] for r in rows], dtype=np.int64),
        child=np.array([r[1] for r in rows], dtype=np.int64),
        lambda_val=np.array([r[2] for r in rows], dtype=np.float64),
        child_size=np.array([r[3] for r in rows], dtype=np.int64),
        n_points=n,
    )


def compute_stability(tree: CondensedTree) -> dict[int, float]:
    """Stability of each cluster: sum over its points of (lambda_leave - lambda_birth)."""
    birth = {tree.root: 0.0}
    for c, lv in zip(tree.child, tree.lambda_val):
        if c >= tree.n_points:
            birth[int(c)] = float(lv)
    terms: dict[int, list[float]] = {c: [] for c in birth}
    for p, lv, s in zip(tree.parent, tree.lambda_val, tree.child_size):
        p = int(p)
        terms[p].append((float(lv) - birth[p]) * int(s))
    # fsum is order independent, which keeps selection invariant to row order
    stab = {c: math.fsum(t) for c, t in terms.items()}
    tree.birth = birth
    tree.stabilities = stab
    return stab


def _children_map(tree: CondensedTree) -> dict[int, list[int]]:
    kids: dict[int, list[int]] = {c: [] for c in tree.birth}
    for p, c in zip(tree.parent, tree.child):
        if c >= tree.n_points:
            kids[int(p)].append(int(c))
    return kids


def select_clusters(tree: CondensedTree, method: str = "excess_of_mass") -> list[int]:
    if not tree.stabilities:
        compute_stability(tree)
    kids = _children_map(tree)
    root = tree.root
    if not kids[root]:
        selected = [root]  # the hierarchy never splits: the whole set is one cluster
    elif method == "leaf":
        selected = [c for c, ks in kids.items() if not ks and c != root]
    else:
        keep: dict[int, bool] = {}
        subtree: dict[int, float] = {}
        # labels are assigned parent-before-child, so descending order is bottom-up
        for c in sorted(kids, reverse=True):
            if c == root:
                continue
            below = math.fsum(subtree[k] for k in kids[c])
            if kids[c] and below > tree.stabilities[c]:
                keep[c] = False
                subtree[c] = below
            else:
                keep[c] = True
                subtree[c] = tree.stabilities[c]
        selected = []
        stack = list(kids[root])
        while stack:
            c = stack.pop()
            if keep[c]:
                selected.append(c)
            else:
                stack.extend(kids[c])
    tree.selected = sorted(selected)
    return tree.selected


def label_points(tree: CondensedTree, selected: Sequence[int]) -> ClusterAssignment:
    n = tree.n_points
    labels = np.full(n, -1, dtype=np.int64)
    probs = np.zeros(n)
    kids: dict[int, list[int]] = {}
    point_rows: dict[int, list[tuple[int, float]]] = {}
    for p, c, lv in zip(tree.parent, tree.child, tree.lambda_val):
        if c >= n:
            kids.setdefault(int(p), []).append(int(c))
        else:
            point_rows.setdefault(int(p), []).append((int(c), float(lv)))

    for label, cluster in enumerate(sorted(selected)):
        members: list[tuple[int, float]] = []
        stack = [cluster]
        while stack:
            c = stack.pop()
            members.extend(point_rows.get(c, ()))
            stack.extend(kids.get(c, ()))
        if not members:
            continue
        lam_max = max(lv for _, lv in members)
        for point, lv in members:
            labels[point] = label
            probs[point] = lv / lam_max if lam_max > 0 else 1.0
    return ClusterAssignment(labels, probs)


def condense_and_extract(mst: Sequence[Edge], params: HdbscanParams) -> tuple[CondensedTree, ClusterAssignment]:
    tree = condense_tree(single_linkage(mst), params.min_cluster_size)
    compute_stability(tree)
    selected = select_clusters(tree, params.cluster_selection)
    return tree, label_points(tree, selected)


def run_hdbscan(matrix, params: HdbscanParams = HdbscanParams(), *, return_tree: bool = False):
    """Cluster the rows of ``matrix``; returns a ClusterAssignment (and tree if asked)."""
    unit = unit_rows(matrix)
    n = unit.shape[0]
    if n < params.min_cluster_size or n < 2:
        assignment = ClusterAssignment(np.full(n, -1, dtype=np.int64), np.zeros(n))
        return (None, assignment) if return_tree else assignment
    min_samples = min(params.effective_min_samples, n - 1)
    core = core_distances(None, min_samples, unit=unit)
    mst = build_mst(None, core, unit=unit)
    tree, assignment = condense_and_extract(mst, params)
    return (tree, assignment) if return_tree else assignment


def dump_clusters_csv(ids, assignment: ClusterAssignment, names: dict[int, str] | None = None) -> str:
    from .vecspace import _csv_cell

    names = names or {}
    lines = ["id,cluster_id,probability,cluster_label"]
    for rid, lab, prob in zip(ids, assignment.labels, assignment.probabilities):
        lines.append(f"{_csv_cell(rid)},{int(lab)},{float(prob)!r},{_csv_cell(names.get(int(lab), ''))}")
    return "\n".join(lines) + "\n"
