"""Stage orchestration: config loading and one function per CLI command."""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import artifacts as A
from . import corpus as corpus_mod
from . import embedder as emb
from .clustereval import (
    DEFAULT_GRID, confusion_matrix, dump_sweep_csv, evaluate, format_table, sweep,
)
from .forest import (
    ForestParams, classification_report, dump_model, predict, split_train_test, train_forest,
)
from .hdbscan import ClusterAssignment, HdbscanParams, dump_clusters_csv, run_hdbscan
from .labeler import ChatClient, LabelerParams, dump_labels_csv, label_clusters, read_labels_csv
from .vecspace import TsneParams, dump_projection_csv, pca_fit_transform, tsne_project

logger = logging.getLogger(__name__)

NOISE_CLASS = "noise"


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    input_path: Path | None = None
    source_kind: str = "generic_tabular"
    ground_truth_column: str | None = None
    explode_designations: bool = False
    workspace: Path = Path("workspace")
    provider: emb.ProviderConfig = field(default_factory=emb.ProviderConfig)
    write_binary: bool = False
    hdbscan: HdbscanParams = field(default_factory=HdbscanParams)
    include_noise_as_cluster: bool = False
    dump_tree: bool = False
    grid: tuple[int, ...] = DEFAULT_GRID
    pca_dim: int = 50
    tsne: TsneParams = field(default_factory=TsneParams)
    labeler: LabelerParams = field(default_factory=LabelerParams)
    labeler_remote: bool = False
    forest: ForestParams = field(default_factory=ForestParams)
    noise_as_class: bool = False
    save_model: bool = False
    n_jobs: int = 1

    @property
    def ws(self) -> A.Workspace:
        return A.Workspace(self.workspace)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_grid(text: str) -> tuple[int, ...]:
    try:
        grid = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from None
    if not grid or any(g < 2 for g in grid):
        raise ConfigError(f"grid values must be integers >= 2: {text!r}")
    return grid


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI-style config; relative paths resolve against the config's directory.

    ``overrides`` holds CLI flag values (``None`` means "not given").
    """
    cp = configparser.ConfigParser()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent

    o = {k: v for k, v in (overrides or {}).items() if v is not None}

    def get(section, key, default=None):
        if cp.has_option(section, key):
            value = cp.get(section, key).strip()
            return value if value != "" else default
        return default

    try:
        cfg = PipelineConfig()
        inp = o.get("input", get("input", "path"))
        if inp:
            p = Path(inp)
            cfg.input_path = p if p.is_absolute() or "input" in o else base / p
        cfg.source_kind = o.get("source_kind", get("input", "source_kind", cfg.source_kind))
        cfg.ground_truth_column = o.get("ground_truth_column", get("input", "ground_truth_column"))
        cfg.explode_designations = o.get(
            "explode_designations", _bool(get("input", "explode_designations", "false"))
        )
        ws = o.get("workspace", get("workspace", "path"))
        if ws:
            p = Path(ws)
            cfg.workspace = p if p.is_absolute() or "workspace" in o else base / p

        kind = o.get("provider", get("embedder", "provider", "local"))
        kind = {"local": "local_hash", "local_hash": "local_hash", "remote": "remote"}.get(kind)
        if kind is None:
            raise ConfigError("embedder provider must be 'local' or 'remote'")
        default_model = emb.LOCAL_MODEL_TAG if kind == "local_hash" else emb.DEFAULT_REMOTE_MODEL
        retry = emb.RetryPolicy(
            max_attempts=int(get("embedder", "max_attempts", 5)),
            base_backoff_ms=float(get("embedder", "base_backoff_ms", 500)),
            multiplier=float(get("embedder", "multiplier", 2)),
        )
        cfg.provider = emb.ProviderConfig(
            kind=kind,
            model_name=get("embedder", "model_name", default_model),
            dim=int(get("embedder", "dim", emb.DEFAULT_DIM)),
            batch_size=int(get("embedder", "batch_size", 256)),
            max_in_flight=int(get("embedder", "max_in_flight", 4)),
            retry=retry,
        )
        cfg.write_binary = o.get("binary", _bool(get("embedder", "binary", "false")))

        ms = get("hdbscan", "min_samples")
        cfg.hdbscan = HdbscanParams(
            min_cluster_size=int(o.get("min_cluster_size", get("hdbscan", "min_cluster_size", 20))),
            min_samples=int(o.get("min_samples", ms)) if o.get("min_samples", ms) is not None else None,
            cluster_selection=get("hdbscan", "cluster_selection", "excess_of_mass"),
        )
        cfg.include_noise_as_cluster = o.get(
            "include_noise_as_cluster", _bool(get("hdbscan", "include_noise_as_cluster", "false"))
        )
        cfg.dump_tree = o.get("dump_tree", _bool(get("hdbscan", "dump_tree", "false")))
        grid = o.get("grid", get("sweep", "grid"))
        if grid:
            cfg.grid = parse_grid(grid)

        seed = o.get("seed")
        cfg.pca_dim = int(get("projection", "pca_dim", 50))
        cfg.tsne = TsneParams(
            perplexity=float(get("projection", "perplexity", 30)),
            learning_rate=float(get("projection", "learning_rate", 200)),
            iterations=int(get("projection", "iterations", 1000)),
            early_exaggeration=float(get("projection", "early_exaggeration", 12)),
            seed=int(seed if seed is not None else get("projection", "seed", 0)),
        )

        labeler_provider = o.get("labeler_provider", get("labeler", "provider"))
        if labeler_provider is None:
            labeler_provider = "remote" if kind == "remote" else "local"
        cfg.labeler_remote = labeler_provider == "remote"
        cfg.labeler = LabelerParams(
            max_representatives=int(get("labeler", "max_representatives", 20)),
            model_name=get("labeler", "model_name", "gpt-3.5-turbo"),
            context_tokens=int(get("labeler", "context_tokens", 4096)),
            reserve_tokens=int(get("labeler", "reserve_tokens", 512)),
            fallback_top_terms=int(get("labeler", "fallback_top_terms", 3)),
        )

        mf = get("forest", "max_features", "sqrt")
        cfg.forest = ForestParams(
            n_trees=int(get("forest", "n_trees", 100)),
            seed=int(seed if seed is not None else get("forest", "seed", 42)),
            max_features=mf if mf == "sqrt" else int(mf),
            min_leaf=int(get("forest", "min_leaf", 1)),
            bootstrap=_bool(get("forest", "bootstrap", "true")),
            test_fraction=float(get("forest", "test_fraction", 0.2)),
            stratified=_bool(get("forest", "stratified", "true")),
        )
        cfg.noise_as_class = o.get("noise_as_class", _bool(get("forest", "noise_as_class", "false")))
        cfg.save_model = o.get("save_model", _bool(get("forest", "save_model", "false")))
        cfg.n_jobs = int(o.get("n_jobs", get("forest", "n_jobs", 1)))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# artifact readers


def read_clusters(ws: A.Workspace) -> tuple[list[str], ClusterAssignment, dict[int, str]]:
    text = ws.read_text(A.CLUSTERS, "cluster")
    ids, labels, probs, names = [], [], [], {}
    for row in csv.DictReader(io.StringIO(text)):
        ids.append(row["id"])
        lab = int(row["cluster_id"])
        labels.append(lab)
        probs.append(float(row["probability"]))
        if row.get("cluster_label"):
            names[lab] = row["cluster_label"]
    return ids, ClusterAssignment(np.array(labels, dtype=np.int64), np.array(probs)), names


def load_embeddings(ws: A.Workspace) -> emb.EmbeddingMatrix:
    return emb.read_jsonl(ws.require(A.EMBEDDINGS, "embed"))


def _truth_for(ws: A.Workspace, ids) -> list[str] | None:
    if not ws.exists(A.CORPUS):
        return None
    by_id = {r.id: r.ground_truth for r in corpus_mod.read_jsonl(ws.path(A.CORPUS))}
    truth = [by_id.get(i) for i in ids]
    if any(t is None for t in truth):
        return None
    return truth


def _check_aligned(expected, got, what: str):
    if list(expected) != list(got):
        raise ValueError(f"{what} ids do not match embeddings.jsonl; re-run the upstream stages")


def _fmt(v, p=4):
    if v is None:
        return "n/a"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.{p}f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# stages; each returns the one-line summary


def cmd_ingest(cfg: PipelineConfig) -> str:
    if cfg.input_path is None:
        raise ConfigError("no input path configured ([input] path or --input)")
    kwargs = {}
    if cfg.source_kind == "nih_json":
        kwargs["explode_designations"] = cfg.explode_designations
    elif cfg.source_kind == "generic_tabular":
        kwargs["ground_truth_column"] = cfg.ground_truth_column
    corpus = corpus_mod.load_corpus(cfg.input_path, cfg.source_kind, **kwargs)
    if not corpus.records:
        raise ValueError(f"{cfg.input_path}: no usable records")
    cfg.ws.write(A.CORPUS, corpus_mod.dump_jsonl(corpus))
    return f"ingest: {len(corpus)} records, {corpus.skipped} skipped -> {A.CORPUS}"


def cmd_embed(cfg: PipelineConfig, provider=None) -> str:
    ws = cfg.ws
    corpus = corpus_mod.read_jsonl(ws.require(A.CORPUS, "ingest"))
    cache = emb.EmbeddingCache(ws.path(A.CACHE_DIR))
    provider = provider or emb.make_provider(cfg.provider)
    matrix = emb.embed_corpus(corpus, cfg.provider, cache, provider)
    ws.write(A.EMBEDDINGS, emb.dump_jsonl(matrix))
    if cfg.write_binary:
        ws.write(A.EMBEDDINGS_BIN, emb.dump_binary(matrix))
    calls = getattr(provider, "calls", "?")
    return f"embed: {len(matrix)} x {matrix.dim} ({matrix.model_tag}), {calls} provider call(s) -> {A.EMBEDDINGS}"


def cmd_cluster(cfg: PipelineConfig) -> str:
    ws = cfg.ws
    matrix = load_embeddings(ws)
    tree, assignment = run_hdbscan(matrix, cfg.hdbscan, return_tree=True)
    truth = _truth_for(ws, matrix.ids)
    report = evaluate(matrix, assignment, cfg.hdbscan.min_cluster_size, truth, cfg.include_noise_as_cluster)
    ws.write(A.CLUSTERS, dump_clusters_csv(matrix.ids, assignment))
    ws.write(A.METRICS, report.to_json())
    if truth is not None:
        ws.write(A.CONFUSION, confusion_matrix(truth, assignment).to_csv())
    if cfg.dump_tree and tree is not None:
        ws.write(A.TREE, tree.dumps())
    line = (
        f"cluster: {assignment.n_clusters} clusters, {assignment.n_outliers} outliers, "
        f"silhouette {_fmt(report.silhouette)}"
    )
    if truth is not None:
        line += f", ARI {_fmt(report.ari)}, NMI {_fmt(report.nmi)}"
    return line


def cmd_sweep(cfg: PipelineConfig) -> str:
    ws = cfg.ws
    matrix = load_embeddings(ws)
    truth = _truth_for(ws, matrix.ids)
    reports = sweep(
        matrix, cfg.grid, truth,
        min_samples=cfg.hdbscan.min_samples,
        cluster_selection=cfg.hdbscan.cluster_selection,
        include_noise_as_cluster=cfg.include_noise_as_cluster,
    )
    ws.write(A.SWEEP, dump_sweep_csv(reports))
    logger.info("sweep results:\n%s", format_table(reports))
    for r in reports:
        if r.error:
            logger.warning("min_cluster_size=%d: %s", r.min_cluster_size, r.error)
        elif r.ari_noise_excluded is not None:
            logger.info("min_cluster_size=%d noise excluded: ARI %s NMI %s", r.min_cluster_size,
                        _fmt(r.ari_noise_excluded), _fmt(r.nmi_noise_excluded))
    counts = "/".join("-" if r.n_clusters is None else str(r.n_clusters) for r in reports)
    return f"sweep: {len(reports)} rows, clusters {counts} -> {A.SWEEP}"


def cmd_label(cfg: PipelineConfig, client: ChatClient | None = None) -> str:
    ws = cfg.ws
    matrix = load_embeddings(ws)
    ids, assignment, _ = read_clusters(ws)
    _check_aligned(matrix.ids, ids, A.CLUSTERS)
    corpus = corpus_mod.read_jsonl(ws.require(A.CORPUS, "ingest"))
    if client is None and cfg.labeler_remote:
        client = ChatClient(retry=cfg.provider.retry)
    summaries = label_clusters(matrix, assignment, corpus, cfg.labeler, client, cfg.provider.max_in_flight)
    ws.write(A.LABELS, dump_labels_csv(summaries))
    names = {s.cluster_id: s.name for s in summaries}
    ws.write(A.CLUSTERS, dump_clusters_csv(ids, assignment, names))
    truth = _truth_for(ws, ids)
    if truth is not None:
        ws.write(A.CONFUSION, confusion_matrix(truth, assignment, names).to_csv())
    n_remote = sum(s.source == "remote" for s in summaries)
    return f"label: {len(summaries)} clusters named ({n_remote} remote, {len(summaries) - n_remote} fallback) -> {A.LABELS}"


def class_names(assignment: ClusterAssignment, names: dict[int, str]) -> dict[int, str]:
    """Target class string per cluster id; duplicated names get the id appended."""
    base = {c: names.get(c) or f"cluster-{c}" for c in range(assignment.n_clusters)}
    seen: dict[str, int] = {}
    for v in base.values():
        seen[v] = seen.get(v, 0) + 1
    return {c: (f"{v} #{c}" if seen[v] > 1 else v) for c, v in base.items()}


def cmd_train(cfg: PipelineConfig) -> str:
    ws = cfg.ws
    matrix = load_embeddings(ws)
    ids, assignment, names = read_clusters(ws)
    _check_aligned(matrix.ids, ids, A.CLUSTERS)
    classes = class_names(assignment, names)
    labels = assignment.labels
    if cfg.noise_as_class:
        keep = np.arange(len(labels))
    else:
        keep = np.flatnonzero(labels != -1)
    if len(keep) < 2:
        raise ValueError("fewer than 2 clustered rows to train on")
    y = [NOISE_CLASS if labels[i] == -1 else classes[int(labels[i])] for i in keep]
    rows = matrix.rows[keep]
    train, test = split_train_test(rows, y, cfg.forest)
    if len(test) == 0:
        raise ValueError("test split is empty; increase test_fraction or corpus size")
    model = train_forest(train, cfg.forest, cfg.n_jobs)
    pred = predict(model, test.rows, cfg.n_jobs)
    report = classification_report(test.labels.tolist(), pred)
    ws.write(A.REPORT, report.format())
    if cfg.save_model:
        ws.write(A.MODEL, dump_model(model))
    return f"train: {len(train)} train / {len(test)} test rows, {len(model.classes)} classes, accuracy {report.accuracy:.4f} -> {A.REPORT}"


def cmd_project(cfg: PipelineConfig) -> str:
    ws = cfg.ws
    matrix = load_embeddings(ws)
    k = min(cfg.pca_dim, len(matrix) - 1, matrix.dim)
    _, reduced = pca_fit_transform(matrix, k)
    result = tsne_project(reduced, cfg.tsne)
    cluster_ids = None
    if ws.exists(A.CLUSTERS):
        ids, assignment, _ = read_clusters(ws)
        _check_aligned(matrix.ids, ids, A.CLUSTERS)
        cluster_ids = assignment.labels
    ws.write(A.PROJECTION, dump_projection_csv(matrix.ids, result.embedding, cluster_ids))
    return f"project: PCA {matrix.dim}->{k}, t-SNE KL {result.kl_initial:.4f} -> {result.kl_final:.4f} -> {A.PROJECTION}"


def cmd_report(cfg: PipelineConfig) -> str:
    ws = cfg.ws
    metrics = json.loads(ws.read_text(A.METRICS, "cluster"))
    labels_text = ws.read_text(A.LABELS, "label")
    report_text = ws.read_text(A.REPORT, "train")
    names = read_labels_csv(labels_text)
    rows = list(csv.DictReader(io.StringIO(labels_text)))

    out = ["# Harmonization summary", "", "## Clustering", "", "| metric | value |", "|---|---|"]
    for key, value in metrics.items():
        out.append(f"| {key} | {'n/a' if value is None else value} |")
    out += ["", "## Cluster labels", "", "| cluster_id | name | members | source |", "|---|---|---|---|"]
    for row in rows:
        out.append(f"| {row['cluster_id']} | {row['name']} | {row['member_count']} | {row['source']} |")
    if ws.exists(A.SWEEP):
        out += ["", "## min_cluster_size sweep", "", "```", ws.read_text(A.SWEEP).rstrip(), "```"]
    out += ["", "## Classifier (held-out split)", "", "```", report_text.rstrip(), "```", ""]
    ws.write(A.SUMMARY, "\n".join(out))
    return f"report: {metrics.get('n_clusters')} clusters, {len(names)} labels -> {A.SUMMARY}"


STAGES = {
    "ingest": cmd_ingest,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "sweep": cmd_sweep,
    "label": cmd_label,
    "train": cmd_train,
    "project": cmd_project,
    "report": cmd_report,
}
RUN_ORDER = ("ingest", "embed", "cluster", "sweep", "label", "train", "project", "report")


DEMO_CONFIG = """\
[input]
path = demo_corpus.csv
source_kind = generic_tabular
ground_truth_column = topic

[workspace]
path = .

[embedder]
provider = local

[hdbscan]
min_cluster_size = 20

[sweep]
grid = 5,10,15,20,25,50,75,100,250

[projection]
pca_dim = 50
perplexity = 30
seed = 0

[labeler]
max_representatives = 20

[forest]
n_trees = 100
seed = 42
"""


def init_demo(directory: str | Path) -> Path:
    from .demo import demo_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    A.atomic_write(directory / "demo_corpus.csv", demo_csv())
    A.atomic_write(directory / "harmonizer.ini", DEMO_CONFIG)
    return directory / "harmonizer.ini"


def with_overrides(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return replace(cfg, **changes)
