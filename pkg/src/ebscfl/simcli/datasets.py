"""Synthetic clustered regression and classification tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..moma import SeedLike, as_rng
from ..rfca import TrainTask

MAX_RESAMPLES = 32


@dataclass(frozen=True)
class SyntheticData:
    clients: tuple[TrainTask, ...]
    tests: tuple[TrainTask, ...]  # one held-out set per cluster
    root: tuple[TrainTask, ...]  # the server's clean data, one shard per cluster
    truth: np.ndarray  # (m, l)
    mixing: np.ndarray  # (n, m) cluster proportions each client was drawn with
    counts: np.ndarray  # (n, m) samples per cluster actually drawn

    @property
    def dominant(self) -> np.ndarray:
        return np.argmax(self.counts, axis=1)


def cluster_truth(m: int, l: int, rng) -> np.ndarray:
    truth = rng.standard_normal((m, l))
    return truth / np.linalg.norm(truth, axis=1, keepdims=True)


def _samples(theta, count: int, kind: str, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    X = rng.standard_normal((count, theta.shape[0]))
    z = X @ theta
    if kind == "linear":
        return X, z + noise * rng.standard_normal(count)
    y = (z + noise * rng.standard_normal(count) > 0).astype(np.float64)
    return X, y


def mixing_weights(m: int, n: int, alpha: float, rng) -> np.ndarray:
    """Per-client cluster proportions from ``Dirichlet(alpha)``.

    ``alpha = inf`` is the even split and ``alpha = 0`` the pure limit, where
    client ``i`` draws only from cluster ``i mod m``.
    """
    if math.isinf(alpha):
        return np.full((n, m), 1.0 / m)
    if alpha == 0:
        return np.eye(m)[np.arange(n) % m]
    return rng.dirichlet(np.full(m, alpha), size=n)


def gen_dataset(m: int, n: int, alpha: float, seed: SeedLike = None, *, l: int = 8, samples: int = 64,
                root_samples: int = 64, test_samples: int = 256, kind: str = "linear", noise: float = 0.1,
                batch_size: int = 16, local_steps: int = 1, lr: float = 0.05) -> SyntheticData:
    """Client datasets mixed over ``m`` ground-truth models with ``Dirichlet(alpha)`` proportions.

    A draw in which some cluster receives no client samples is redrawn (at
    most ``MAX_RESAMPLES`` times).
    """
    if n < m:
        raise ValueError(f"need n >= m, got n={n}, m={m}")
    if m < 1 or l < 1 or samples < 1:
        raise ValueError("m, l and samples must be positive")
    rng = as_rng(seed)
    truth = cluster_truth(m, l, rng)
    for _ in range(MAX_RESAMPLES):
        mixing = mixing_weights(m, n, alpha, rng)
        counts = np.stack([rng.multinomial(samples, p) for p in mixing])
        if np.all(counts.sum(axis=0) > 0):
            break
    else:
        raise RuntimeError(f"no draw covered every cluster after {MAX_RESAMPLES} attempts")

    def task(parts, cluster=None):
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        return TrainTask(X=X, y=y, kind=kind, batch_size=batch_size, local_steps=local_steps, lr=lr,
                         truth=truth, cluster=cluster)

    clients = []
    for row in counts:
        parts = [_samples(truth[j], int(c), kind, noise, rng) for j, c in enumerate(row) if c > 0]
        clients.append(task(parts, int(np.argmax(row))))
    tests = tuple(task([_samples(truth[j], test_samples, kind, noise, rng)], j) for j in range(m))
    root = tuple(task([_samples(truth[j], root_samples, kind, noise, rng)], j) for j in range(m))
    return SyntheticData(clients=tuple(clients), tests=tests, root=root, truth=truth, mixing=mixing,
                         counts=counts)
