"""Cluster validation: internal metrics, external agreement, sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .hdbscan import ClusterAssignment, HdbscanParams, run_hdbscan
from .vecspace import as_array, distance_block, unit_rows

logger = logging.getLogger(__name__)

NOISE = -1
CHUNK = 2048
TABLE_COLUMNS = (
    "min_cluster_size", "silhouette", "dunn_index", "davies_bouldin",
    "n_clusters", "n_outliers", "ari", "nmi",
)
DEFAULT_GRID = (5, 10, 15, 20, 25, 50, 75, 100, 250)


class UndefinedMetricError(ValueError):
    """The metric needs at least two non-noise clusters."""


# ---------------------------------------------------------------------------
# internal metrics


def _labels_of(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels))


def _prepare(matrix, labels, include_noise: bool):
    x = as_array(matrix)
    lab = _labels_of(labels)
    if len(lab) != x.shape[0]:
        raise ValueError(f"{len(lab)} labels for {x.shape[0]} rows")
    if not include_noise:
        keep = lab != NOISE
        x, lab = x[keep], lab[keep]
    clusters, inverse = np.unique(lab, return_inverse=True)
    if len(clusters) < 2:
        raise UndefinedMetricError(f"need >= 2 clusters, got {len(clusters)}")
    # sort rows by cluster so per-cluster reductions are contiguous
    order = np.argsort(inverse, kind="stable")
    inv = inverse[order]
    starts = np.flatnonzero(np.r_[True, inv[1:] != inv[:-1]])
    return x[order], inv, starts, np.diff(np.r_[starts, len(inv)])


def _row_chunks(x, metric):
    for s in range(0, x.shape[0], CHUNK):
        d = distance_block(x[s : s + CHUNK], x, metric)
        r = np.arange(d.shape[0])
        d[r, s + r] = 0.0
        yield s, d


def silhouette_mean(matrix, labels, metric: str = "cosine", include_noise: bool = False) -> float:
    """Mean silhouette over non-noise points; singleton members score 0."""
    x, inv, starts, sizes = _prepare(matrix, labels, include_noise)
    n = x.shape[0]
    total = 0.0
    for s, d in _row_chunks(x, metric):
        sums = np.add.reduceat(d, starts, axis=1)
        rows = np.arange(d.shape[0])
        own = inv[s : s + d.shape[0]]
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes[None, :]
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        with np.errstate(invalid="ignore", divide="ignore"):
            sil = np.where(denom > 0, (b - a) / denom, 0.0)
        sil[own_size == 1] = 0.0
        total += float(sil.sum())
    return total / n


def dunn_index(matrix, labels, metric: str = "cosine", include_noise: bool = False) -> float:
    """Min single-linkage separation over max cluster diameter (inf if all diameters are 0)."""
    x, inv, starts, _ = _prepare(matrix, labels, include_noise)
    min_sep = math.inf
    max_diam = 0.0
    for s, d in _row_chunks(x, metric):
        rows = np.arange(d.shape[0])
        own = inv[s : s + d.shape[0]]
        mins = np.minimum.reduceat(d, starts, axis=1)
        maxs = np.maximum.reduceat(d, starts, axis=1)
        max_diam = max(max_diam, float(maxs[rows, own].max()))
        mins[rows, own] = np.inf
        min_sep = min(min_sep, float(mins.min()))
    if max_diam == 0.0:
        return math.inf
    return min_sep / max_diam


def davies_bouldin(matrix, labels, metric: str = "cosine", include_noise: bool = False) -> float:
    """Davies-Bouldin index. Cosine mode renormalizes centroids to unit length."""
    x, inv, starts, sizes = _prepare(matrix, labels, include_noise)
    if metric == "cosine":
        x = unit_rows(x)
    centroids = np.add.reduceat(x, starts, axis=0) / sizes[:, None]
    scatter = np.array(
        [distance_block(x[i : i + n], centroids[k : k + 1], metric).mean() for k, (i, n) in enumerate(zip(starts, sizes))]
    )
    sep = distance_block(centroids, centroids, metric)
    c = len(sizes)
    worst = np.empty(c)
    for i in range(c):
        ratios = []
        for j in range(c):
            if j == i:
                continue
            ratios.append(math.inf if sep[i, j] == 0 else (scatter[i] + scatter[j]) / sep[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


# ---------------------------------------------------------------------------
# external metrics


def _as_list(x) -> list:
    return x.tolist() if isinstance(x, np.ndarray) else list(x)


def _contingency(truth, pred) -> tuple[Counter, dict, dict, int]:
    """Joint and marginal label counts as integer Counters."""
    truth, pred = _as_list(truth), _as_list(pred)
    if len(truth) != len(pred):
        raise ValueError(f"length mismatch: {len(truth)} vs {len(pred)}")
    joint = Counter(zip(truth, pred))
    rows: dict = {}
    cols: dict = {}
    for (t, q), c in joint.items():
        rows[t] = rows.get(t, 0) + c
        cols[q] = cols.get(q, 0) + c
    return joint, rows, cols, len(truth)


def _pairs(counts) -> int:
    return sum(c * (c - 1) // 2 for c in counts)


def adjusted_rand_index(truth, pred) -> float:
    if len(truth) < 2:
        raise ValueError("ARI needs at least 2 points")
    joint, rows, cols, n = _contingency(truth, pred)
    index = _pairs(joint.values())
    sum_a = _pairs(rows.values())
    sum_b = _pairs(cols.values())
    expected = sum_a * sum_b / (n * (n - 1) // 2)
    maximum = (sum_a + sum_b) / 2
    if maximum == expected:
        identical = len(joint) == len(rows) == len(cols)
        return 1.0 if identical else 0.0
    return (index - expected) / (maximum - expected)


def _xlogx_sum(counts) -> float:
    # fsum is correctly rounded, so the result does not depend on label order
    return math.fsum([c * math.log(c) for c in counts])


def normalized_mutual_information(truth, pred, average: str = "arithmetic") -> float:
    """Mutual information normalized by a mean of the two entropies (natural log)."""
    if len(truth) < 1:
        raise ValueError("NMI needs at least 1 point")
    if average not in ("arithmetic", "geometric", "min", "max"):
        raise ValueError(f"unknown average {average!r}")
    joint, rows, cols, n = _contingency(truth, pred)
    if len(joint) == len(rows) == len(cols):
        return 1.0  # identical up to relabeling (includes the single-cluster case)
    # H = log n - sum(c log c) / n for each marginal, and
    # MI = log n + (sum(n_ij log n_ij) - sum(a log a) - sum(b log b)) / n
    log_n = math.log(n)
    s_t = _xlogx_sum(rows.values())
    s_p = _xlogx_sum(cols.values())
    h_t = log_n - s_t / n
    h_p = log_n - s_p / n
    mi = max(math.fsum([n * log_n, _xlogx_sum(joint.values()), -s_t, -s_p]) / n, 0.0)
    if len(rows) == 1 or len(cols) == 1:
        # a single-cluster side carries no information; avoid rounding residue
        mi = 0.0
        h_t = 0.0 if len(rows) == 1 else h_t
        h_p = 0.0 if len(cols) == 1 else h_p
    if average == "arithmetic":
        norm = (h_t + h_p) / 2
    elif average == "geometric":
        norm = math.sqrt(h_t * h_p)
    elif average == "min":
        norm = min(h_t, h_p)
    else:
        norm = max(h_t, h_p)
    if norm == 0:
        return 0.0
    return min(1.0, mi / norm)


def external_scores(truth, pred, exclude_noise: bool = False) -> tuple[float, float]:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if exclude_noise:
        keep = pred != NOISE
        truth, pred = truth[keep], pred[keep]
    return adjusted_rand_index(truth, pred), normalized_mutual_information(truth, pred)


# ---------------------------------------------------------------------------
# confusion matrix


@dataclass(frozen=True)
class ConfusionMatrix:
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    counts: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth_label", *self.col_labels])
        for name, row in zip(self.row_labels, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(truth: Sequence[str], pred, cluster_names: dict[int, str] | None = None) -> ConfusionMatrix:
    """Truth classes x clusters, noise (-1) dropped."""
    pred = np.asarray(_labels_of(pred))
    truth = np.asarray(truth, dtype=object)
    if len(truth) != len(pred):
        raise ValueError("length mismatch")
    keep = pred != NOISE
    truth, pred = truth[keep], pred[keep]
    rows = sorted(set(truth.tolist()))
    cols = sorted(set(int(p) for p in pred))
    r_index = {r: k for k, r in enumerate(rows)}
    c_index = {c: k for k, c in enumerate(cols)}
    counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for t, p in zip(truth, pred):
        counts[r_index[t], c_index[int(p)]] += 1
    names = cluster_names or {}
    return ConfusionMatrix(tuple(rows), tuple(names.get(c, str(c)) for c in cols), counts)


# ---------------------------------------------------------------------------
# validation reports and sweeps


@dataclass
class ValidationReport:
    min_cluster_size: int
    silhouette: float | None
    dunn: float | None
    davies_bouldin: float | None
    n_clusters: int | None
    n_outliers: int | None
    ari: float | None = None
    nmi: float | None = None
    ari_noise_excluded: float | None = None
    nmi_noise_excluded: float | None = None
    error: str | None = None

    def as_row(self) -> dict:
        return {
            "min_cluster_size": self.min_cluster_size,
            "silhouette": self.silhouette,
            "dunn_index": self.dunn,
            "davies_bouldin": self.davies_bouldin,
            "n_clusters": self.n_clusters,
            "n_outliers": self.n_outliers,
            "ari": self.ari,
            "nmi": self.nmi,
        }

    def to_json(self) -> str:
        row = {k: _json_value(v) for k, v in self.as_row().items()}
        return json.dumps(row, indent=2) + "\n"


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


def evaluate(matrix, assignment: ClusterAssignment, min_cluster_size: int, truth=None,
             include_noise_as_cluster: bool = False) -> ValidationReport:
    kw = {"include_noise": include_noise_as_cluster}
    report = ValidationReport(
        min_cluster_size=min_cluster_size,
        silhouette=_safe(silhouette_mean, matrix, assignment, **kw),
        dunn=_safe(dunn_index, matrix, assignment, **kw),
        davies_bouldin=_safe(davies_bouldin, matrix, assignment, **kw),
        n_clusters=assignment.n_clusters,
        n_outliers=assignment.n_outliers,
    )
    if truth is not None:
        report.ari, report.nmi = external_scores(truth, assignment.labels)
        if assignment.n_outliers < len(assignment):
            report.ari_noise_excluded, report.nmi_noise_excluded = external_scores(
                truth, assignment.labels, exclude_noise=True
            )
    return report


def sweep(matrix, grid: Sequence[int] = DEFAULT_GRID, truth=None, *, min_samples: int | None = None,
          cluster_selection: str = "excess_of_mass", include_noise_as_cluster: bool = False) -> list[ValidationReport]:
    """One ValidationReport per ``min_cluster_size`` in ``grid``; failures become null rows."""
    if not grid:
        raise ValueError("grid must be nonempty")
    if any(g < 2 for g in grid):
        raise ValueError("every grid value must be >= 2")
    reports = []
    for mcs in grid:
        try:
            params = HdbscanParams(int(mcs), min_samples, cluster_selection)
            assignment = run_hdbscan(matrix, params)
            reports.append(evaluate(matrix, assignment, int(mcs), truth, include_noise_as_cluster))
        except Exception as exc:  # noqa: BLE001 - sweep rows fail independently
            logger.warning("sweep row min_cluster_size=%s failed: %s", mcs, exc)
            reports.append(ValidationReport(int(mcs), None, None, None, None, None, error=str(exc)))
    return reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def dump_sweep_csv(reports: Sequence[ValidationReport]) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    for r in reports:
        row = r.as_row()
        lines.append(",".join(_cell(row[c]) for c in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def format_table(reports: Sequence[ValidationReport]) -> str:
    """Plain-text rendering of a sweep for terminals."""
    head = f"{'mcs':>5} {'silhouette':>10} {'dunn':>8} {'db':>8} {'clusters':>8} {'outliers':>8} {'ari':>7} {'nmi':>7}"
    out = [head]

    def f(v, w, p=4):
        if v is None:
            return f"{'-':>{w}}"
        if isinstance(v, float):
            return f"{'inf':>{w}}" if math.isinf(v) else f"{v:>{w}.{p}f}"
        return f"{v:>{w}}"

    for r in reports:
        out.append(" ".join([
            f(r.min_cluster_size, 5), f(r.silhouette, 10), f(r.dunn, 8), f(r.davies_bouldin, 8),
            f(r.n_clusters, 8), f(r.n_outliers, 8), f(r.ari, 7), f(r.nmi, 7),
        ]))
    return "\n".join(out)


def report_dict(report: ValidationReport) -> dict:
    return asdict(report)
