"""Distance kernels and dimensionality reduction (PCA, exact t-SNE)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


# Distances below this are rounding noise of the dot product and read as 0,
# so duplicate rows are exactly coincident.
ZERO_SNAP = 1e-12


class DomainError(ValueError):
    """Input outside the domain of a distance (e.g. a zero vector)."""


class ParameterError(ValueError):
    pass


def as_array(matrix) -> np.ndarray:
    rows = getattr(matrix, "rows", matrix)
    return np.asarray(rows, dtype=np.float64)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("cosine distance is undefined for a zero vector")
    return float(min(2.0, max(0.0, 1.0 - float(u @ v) / (nu * nv))))


def unit_rows(matrix) -> np.ndarray:
    """Float64 copy of the rows scaled to unit length."""
    x = as_array(matrix)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("matrix contains a zero row")
    return x / norms


def distance_row(unit: np.ndarray, i: int) -> np.ndarray:
    """Cosine distances from row ``i`` of a unit-row matrix to every row.

    ``einsum`` reduces each product vector in the same order, so
    ``distance_row(u, i)[j] == distance_row(u, j)[i]`` bit for bit. The
    MST and core-distance stages rely on that symmetry.
    """
    d = 1.0 - np.einsum("ij,j->i", unit, unit[i])
    np.clip(d, 0.0, 2.0, out=d)
    d[d < ZERO_SNAP] = 0.0
    d[i] = 0.0
    return d


def pairwise_row(matrix, i: int, *, unit: np.ndarray | None = None) -> np.ndarray:
    """Row ``i`` of the cosine distance matrix, in O(N) memory."""
    unit = unit_rows(matrix) if unit is None else unit
    n = unit.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"row index {i} out of range for {n} rows")
    return distance_row(unit, i)


def distance_block(a: np.ndarray, b: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Dense distances between the rows of ``a`` and ``b`` (chunk-sized inputs)."""
    if metric == "cosine":
        d = 1.0 - unit_rows(a) @ unit_rows(b).T
        np.clip(d, 0.0, 2.0, out=d)
        d[d < ZERO_SNAP] = 0.0
        return d
    if metric == "euclidean":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # k x D, orthonormal rows
    explained_variance: np.ndarray

    @property
    def target_dim(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        return (as_array(x) - self.mean) @ self.components.T

    def inverse_transform(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) @ self.components + self.mean


def pca_fit_transform(matrix, k: int = 50) -> tuple[PcaModel, np.ndarray]:
    """Thin-SVD PCA. Each component is signed so its largest |coordinate| is positive."""
    x = as_array(matrix)
    n, d = x.shape
    if n < 2:
        raise ParameterError("PCA needs at least 2 rows")
    if not 1 <= k <= min(n - 1, d):
        raise ParameterError(f"k={k} outside [1, {min(n - 1, d)}]")
    if not np.all(np.isfinite(x)):
        raise ParameterError("matrix contains non-finite entries")

    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k].copy()
    pivots = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(k), pivots])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    var = np.maximum(s[:k] ** 2 / (n - 1), 0.0)
    model = PcaModel(mean, comps, var)
    return model, centered @ comps.T


# ---------------------------------------------------------------------------
# t-SNE


@dataclass(frozen=True)
class TsneParams:
    perplexity: float = 30.0
    learning_rate: float = 200.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iterations: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 250:
            raise ParameterError("iterations must be >= 250")


@dataclass(frozen=True)
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(sq_dist: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Row-stochastic P(j|i) with per-row precision found by bisection on entropy."""
    n = sq_dist.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            # shift by the minimum for numerical stability; entropy is shift-invariant
            w = np.exp(-(d - d.min()) * beta)
            sw = w.sum()
            row = w / sw
            entropy = math.log(sw) + beta * float(((d - d.min()) * row).sum())
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        p[i, np.arange(n) != i] = row
    return p


def _kl(p: np.ndarray, y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def tsne_project(reduced, params: TsneParams = TsneParams()) -> TsneResult:
    """Exact O(N^2) t-SNE to two dimensions."""
    x = as_array(reduced)
    n = x.shape[0]
    if n < 4:
        raise ParameterError("t-SNE needs at least 4 points")
    if not 1 < params.perplexity < (n - 1) / 3:
        raise ParameterError(f"perplexity {params.perplexity} infeasible for N={n}; need 1 < perplexity < {(n - 1) / 3:.3g}")

    cond = conditional_affinities(_sq_distances(x), params.perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)

    rng = np.random.default_rng(params.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl_initial = _kl(p, y)

    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(params.iterations):
        exaggerate = it < params.exaggeration_iterations
        pe = p * params.early_exaggeration if exaggerate else p
        momentum = 0.5 if it < 250 else 0.8

        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (pe - q) * num
        grad = 4.0 * (w.sum(1)[:, None] * y - w @ y)

        same_sign = (grad > 0) == (velocity > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - params.learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)

    return TsneResult(y, kl_initial, _kl(p, y))


def dump_projection_csv(ids, coords: np.ndarray, cluster_ids=None) -> str:
    lines = ["id,x,y,cluster_id"]
    for k, (rid, (x, y)) in enumerate(zip(ids, coords)):
        cid = "" if cluster_ids is None else str(int(cluster_ids[k]))
        lines.append(f"{_csv_cell(rid)},{float(x)!r},{float(y)!r},{cid}")
    return "\n".join(lines) + "\n"


def _csv_cell(value: str) -> str:
    if any(c in value for c in ',"\n\r'):
        return '"' + value.replace('"', '""') + '"'
    return value
