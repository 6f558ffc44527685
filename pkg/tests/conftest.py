from __future__ import annotations

import numpy as np
import pytest


def blobs(n_per: int, centers: np.ndarray, sigma: float, seed: int = 0):
    """Gaussian blobs around ``centers``; returns (points, labels)."""
    rng = np.random.default_rng(seed)
    pts = np.concatenate([c + sigma * rng.standard_normal((n_per, centers.shape[1])) for c in centers])
    labels = np.repeat(np.arange(len(centers)), n_per)
    return pts, labels


def direction_blobs(n_per: int, k: int, dim: int, spread: float, seed: int = 0):
    """Blobs on the unit sphere around ``k`` orthogonal directions (cosine-friendly)."""
    rng = np.random.default_rng(seed)
    centers = np.eye(dim)[:k] * 1.0
    pts = np.concatenate([c + spread * rng.standard_normal((n_per, dim)) for c in centers])
    return pts, np.repeat(np.arange(k), n_per)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
