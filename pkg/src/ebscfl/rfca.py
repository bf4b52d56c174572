"""Plaintext robust clustered federated learning.

Clients pick the cluster model with the lowest batch loss, train locally and
report the model delta.  The server weighs each delta by ``ReLU`` of its
cosine with the cluster's reference update ``g0`` (trained on clean root
data), rescales it to ``|g0|`` and averages per cluster.  This module is both
the robustness baseline and the oracle the secure pipeline is checked against.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .moma import SeedLike, as_rng

logger = logging.getLogger(__name__)

CLUSTER_EPS = 1e-6  # per-cluster weight below which the cluster is frozen
NOOP_EPS = 1e-9  # total weight below which the round is a no-op
TASK_KINDS = ("linear", "logistic")


@dataclass(frozen=True)
class ClusterState:
    models: np.ndarray  # (m, l)
    server_updates: np.ndarray  # (m, l)
    eta: float

    @property
    def m(self) -> int:
        return self.models.shape[0]

    @property
    def l(self) -> int:
        return self.models.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.server_updates, axis=1)

    @property
    def active(self) -> np.ndarray:
        return self.norms > 0


@dataclass(frozen=True)
class ClientUpdate:
    cluster: int
    gradient: np.ndarray

    def onehot(self, m: int) -> np.ndarray:
        s = np.zeros(m)
        s[self.cluster] = 1.0
        return s


@dataclass(frozen=True)
class TrainTask:
    X: np.ndarray  # (N, l)
    y: np.ndarray  # (N,) targets, {0, 1} for logistic
    kind: str = "linear"
    batch_size: int = 16
    local_steps: int = 1
    lr: float = 0.1
    truth: np.ndarray | None = None  # (m, l) ground-truth cluster parameters, synthetic tasks only
    cluster: int | None = None  # dominant ground-truth cluster, synthetic tasks only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        if len(self.X) == 0:
            raise ValueError("empty dataset")
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")

    @property
    def size(self) -> int:
        return len(self.X)

    def batch(self, rng) -> np.ndarray:
        b = min(self.batch_size, self.size)
        return rng.choice(self.size, size=b, replace=False)

    def loss(self, theta, idx=None) -> float:
        X, y = (self.X, self.y) if idx is None else (self.X[idx], self.y[idx])
        z = X @ theta
        if self.kind == "linear":
            return float(0.5 * np.mean((z - y) ** 2))
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def grad(self, theta, idx=None) -> np.ndarray:
        X, y = (self.X, self.y) if idx is None else (self.X[idx], self.y[idx])
        z = X @ theta
        resid = z - y if self.kind == "linear" else 1.0 / (1.0 + np.exp(-z)) - y
        return X.T @ resid / len(y)

    def accuracy(self, theta) -> float:
        """Classification accuracy for logistic tasks, ``1 - relative error`` style score otherwise."""
        z = self.X @ theta
        if self.kind == "logistic":
            return float(np.mean((z > 0) == (self.y > 0.5)))
        denom = float(np.mean(self.y**2)) or 1.0
        return float(1.0 - np.mean((z - self.y) ** 2) / denom)


def clustered_model_update(models, task: TrainTask, eta: float, T: int | None = None,
                           seed: SeedLike = None) -> tuple[int, np.ndarray]:
    """Pick the model with the lowest batch loss (lowest index on ties), run ``T`` SGD steps, return the delta."""
    models = np.atleast_2d(np.asarray(models, dtype=np.float64))
    T = task.local_steps if T is None else T
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = as_rng(seed)
    idx = task.batch(rng)
    losses = np.array([task.loss(th, idx) for th in models])
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError(f"non-finite loss while selecting a cluster: {losses}")
    j = int(np.argmin(losses))
    theta = models[j].copy()
    for _ in range(T):
        theta -= eta * task.grad(theta, task.batch(rng))
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("local training diverged")
    return j, theta - models[j]


def server_init(task0: TrainTask | Sequence[TrainTask], models0, eta_I: float, T_s: int, n_splits: int | None,
                eta: float, seed: SeedLike = None) -> ClusterState:
    """Server updates from the root data: every shard trains and adds ``(m / n_splits) * delta`` to its cluster.

    ``task0`` is either one root task, split at random into ``n_splits``
    shards, or a sequence of prepared shards (``n_splits`` is then ignored).
    """
    models0 = np.atleast_2d(np.asarray(models0, dtype=np.float64))
    m, l = models0.shape
    rng = as_rng(seed)
    if isinstance(task0, TrainTask):
        if n_splits is None or n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        shards = [replace(task0, X=task0.X[idx], y=task0.y[idx])
                  for idx in np.array_split(rng.permutation(task0.size), n_splits) if len(idx)]
    else:
        shards = list(task0)
        n_splits = len(shards)
        if not shards:
            raise ValueError("need at least one root shard")
    g0 = np.zeros((m, l))
    for sub in shards:
        j, delta = clustered_model_update(models0, sub, eta_I, T_s, rng)
        g0[j] += (m / n_splits) * delta
    state = ClusterState(models=models0.copy(), server_updates=g0, eta=eta)
    for j in np.flatnonzero(~state.active):
        logger.warning("cluster %d has a zero server update and is inactive", j)
    return state


@dataclass(frozen=True)
class PlainAggregate:
    updates: np.ndarray  # (m, l)
    weights: np.ndarray  # (n,) ReLU(c_i) of each client for its own cluster
    cluster_weights: np.ndarray  # (m,)
    active: np.ndarray  # (m,) bool


def cosine_weights(state: ClusterState, updates: Sequence[ClientUpdate]) -> np.ndarray:
    """``ReLU(cos(g_i, g0^{c_i}))`` per client; zero for zero-norm gradients and inactive clusters."""
    out = np.zeros(len(updates))
    norms0 = state.norms
    for i, u in enumerate(updates):
        gn = float(np.linalg.norm(u.gradient))
        if gn == 0.0 or norms0[u.cluster] == 0.0:
            continue
        c = float(u.gradient @ state.server_updates[u.cluster]) / (gn * norms0[u.cluster])
        out[i] = max(c, 0.0)
    return out


def aggregate_plain(state: ClusterState, updates: Sequence[ClientUpdate], *, weighting: str = "cluster"
                    ) -> PlainAggregate:
    """Per-cluster ``(1 / sum ReLU c) * sum ReLU(c_i) |g0| / |g_i| * g_i``.

    ``weighting="global"`` divides every cluster by the weight sum over all
    clusters instead.  Clusters whose denominator is at most ``1e-9`` are left
    inactive with a zero update.
    """
    if not updates:
        raise ValueError("need at least one client update")
    m, l = state.m, state.l
    for u in updates:
        if u.gradient.shape != (l,):
            raise ValueError(f"gradient length {u.gradient.shape} != {l}")
        if np.linalg.norm(u.gradient) == 0.0:
            logger.warning("zero-norm gradient excluded (cosine undefined)")
    w = cosine_weights(state, updates)
    sums = np.zeros((m, l))
    cw = np.zeros(m)
    norms0 = state.norms
    for wi, u in zip(w, updates):
        if wi == 0.0:
            continue
        sums[u.cluster] += wi * norms0[u.cluster] * u.gradient / np.linalg.norm(u.gradient)
        cw[u.cluster] += wi
    if weighting == "cluster":
        active = cw > CLUSTER_EPS
        denom = np.where(active, cw, 1.0)
    elif weighting == "global":
        total = cw.sum()
        active = np.full(m, total > NOOP_EPS)
        denom = np.full(m, total if total > NOOP_EPS else 1.0)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    out = np.where(active[:, None], sums / denom[:, None], 0.0)
    return PlainAggregate(updates=out, weights=w, cluster_weights=cw, active=active)


def fedavg_aggregate(state: ClusterState, updates: Sequence[ClientUpdate]) -> PlainAggregate:
    """Unweighted per-cluster mean of the raw deltas (no robustness)."""
    m, l = state.m, state.l
    sums = np.zeros((m, l))
    counts = np.zeros(m)
    for u in updates:
        sums[u.cluster] += u.gradient
        counts[u.cluster] += 1
    active = counts > 0
    out = np.where(active[:, None], sums / np.maximum(counts, 1)[:, None], 0.0)
    return PlainAggregate(updates=out, weights=np.ones(len(updates)), cluster_weights=counts, active=active)


def apply_update(state: ClusterState, agg: PlainAggregate, eta: float | None = None) -> ClusterState:
    eta = state.eta if eta is None else eta
    models = state.models.copy()
    models[agg.active] += eta * agg.updates[agg.active]
    return replace(state, models=models)


Aggregator = Callable[[ClusterState, Sequence[ClientUpdate], int], PlainAggregate]
AttackHook = Callable[[int, ClientUpdate, dict], ClientUpdate]


@dataclass
class RoundRecord:
    round: int
    eta: float
    losses: np.ndarray  # (m,) mean loss on each cluster's evaluation set
    accuracy: np.ndarray  # (m,)
    param_error: np.ndarray  # (m,) |theta_j - theta_j*| when ground truth is known
    weights: np.ndarray  # (n,) per-client aggregation weights
    clusters: np.ndarray  # (n,) chosen cluster per client


@dataclass
class History:
    rounds: list[RoundRecord] = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rounds])


def plain_aggregator(weighting: str = "cluster") -> Aggregator:
    return lambda state, updates, rnd: aggregate_plain(state, updates, weighting=weighting)


def run_rounds(state: ClusterState, clients: Sequence[TrainTask], T_g: int, *,
               aggregator: Aggregator | None = None, attack: AttackHook | None = None,
               adversaries: Sequence[int] = (), eval_tasks: Sequence[TrainTask] | None = None,
               truth: np.ndarray | None = None, eta_decay: float = 1.0, seed: SeedLike = None
               ) -> tuple[ClusterState, History]:
    """Broadcast, local training (with optional adversarial substitution), aggregation and update for ``T_g`` rounds.

    ``eta_decay`` multiplies the server learning rate after every round (1.0
    keeps it fixed).  Adversaries in ``adversaries`` have their updates passed
    through ``attack``.
    """
    if T_g < 1:
        raise ValueError("T_g must be >= 1")
    aggregator = aggregator or plain_aggregator()
    rng = as_rng(seed)
    history = History()
    adv = set(adversaries)
    eta = state.eta
    for rnd in range(T_g):
        updates = []
        for i, task in enumerate(clients):
            j, delta = clustered_model_update(state.models, task, task.lr, seed=rng)
            upd = ClientUpdate(cluster=j, gradient=delta)
            if i in adv and attack is not None:
                upd = attack(i, upd, {"round": rnd, "state": state, "task": task, "rng": rng,
                                       "honest": updates})
            updates.append(upd)
        agg = aggregator(state, updates, rnd)
        state = apply_update(state, agg, eta)
        if not np.all(np.isfinite(state.models)):
            raise FloatingPointError(f"models diverged in round {rnd}")
        history.rounds.append(_record(rnd, eta, state, agg, updates, eval_tasks, truth))
        eta *= eta_decay
    return replace(state, eta=eta), history


def _record(rnd, eta, state, agg, updates, eval_tasks, truth) -> RoundRecord:
    m = state.m
    losses = np.full(m, np.nan)
    acc = np.full(m, np.nan)
    if eval_tasks is not None:
        for j, task in enumerate(eval_tasks[:m]):
            losses[j] = task.loss(state.models[j])
            acc[j] = task.accuracy(state.models[j])
    err = np.linalg.norm(state.models - truth, axis=1) if truth is not None else np.full(m, np.nan)
    return RoundRecord(round=rnd, eta=eta, losses=losses, accuracy=acc, param_error=err,
                       weights=agg.weights, clusters=np.array([u.cluster for u in updates]))
