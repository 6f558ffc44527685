"""Workspace artifacts: fixed file names, atomic writes, locking."""
from __future__ import annotations

import contextlib
import os
import tempfile
from pathlib import Path

CORPUS = "corpus.jsonl"
EMBEDDINGS = "embeddings.jsonl"
EMBEDDINGS_BIN = "embeddings.bin"
CLUSTERS = "clusters.csv"
METRICS = "metrics.json"
SWEEP = "sweep.csv"
LABELS = "cluster_labels.csv"
PROJECTION = "projection.csv"
CONFUSION = "confusion.csv"
REPORT = "report.txt"
SUMMARY = "summary.md"
MODEL = "model.bin"
TREE = "condensed_tree.json"
LOCK = ".harmonizer.lock"
CACHE_DIR = "cache"


class MissingArtifact(Exception):
    def __init__(self, name: str, hint: str | None = None):
        msg = f"missing artifact: {name}"
        super().__init__(msg + (f" (run `harmonizer {hint}` first)" if hint else ""))
        self.name = name


@contextlib.contextmanager
def atomic_writer(path: str | Path, mode: str = "w"):
    """Yield a temp file next to ``path``; rename over ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write(path: str | Path, data: str | bytes) -> None:
    with atomic_writer(path, "wb" if isinstance(data, bytes) else "w") as fh:
        fh.write(data)


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def require(self, name: str, hint: str | None = None) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise MissingArtifact(name, hint)
        return p

    def write(self, name: str, data: str | bytes) -> Path:
        p = self.path(name)
        atomic_write(p, data)
        return p

    def read_text(self, name: str, hint: str | None = None) -> str:
        return self.require(name, hint).read_text(encoding="utf-8")

    def lock(self):
        from filelock import FileLock

        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path(LOCK)), timeout=0)
