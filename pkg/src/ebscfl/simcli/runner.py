"""End-to-end simulated training runs and their attack-free twins."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from ..rfca import ClusterState, History, fedavg_aggregate, plain_aggregator, run_rounds, server_init
from .attacks import attack_hook
from .config import RunConfig
from .datasets import SyntheticData, gen_dataset
from .metrics import MetricsRow, compute_metrics, final_accuracy
from .secure import SecureAggregator

logger = logging.getLogger(__name__)

MODES = ("secure", "plain", "fedavg")


@dataclass
class RunResult:
    config: RunConfig
    mode: str
    data: SyntheticData
    initial: ClusterState
    state: ClusterState
    history: History
    aggregator: object

    @property
    def final_error(self) -> float:
        """Mean distance of the cluster models to their ground truth after the last round."""
        return float(np.mean(np.linalg.norm(self.state.models - self.data.truth, axis=1)))

    @property
    def final_accuracy(self) -> float:
        return final_accuracy(self.history)

    def metrics(self, na_reference: float | None = None) -> list[MetricsRow]:
        traces = getattr(self.aggregator, "traces", None)
        kwargs = {}
        if traces:
            kwargs = dict(client_bytes=[t.upload_bytes for t in traces],
                          server_bytes=[t.broadcast_bytes for t in traces],
                          seconds=[t.seconds for t in traces])
        return compute_metrics(self.history, na_reference, self.config.adversaries, **kwargs)


def build_data(cfg: RunConfig) -> SyntheticData:
    d, tr = cfg.data, cfg.train
    return gen_dataset(cfg.dims.m, cfg.dims.n, d.alpha, [cfg.seed, 0], l=cfg.dims.l, samples=d.samples,
                       root_samples=d.root_samples, test_samples=d.test_samples, kind=d.kind, noise=d.noise,
                       batch_size=tr.batch_size, local_steps=tr.local_steps, lr=tr.lr)


def initial_models(cfg: RunConfig, truth: np.ndarray) -> np.ndarray:
    """Ground truth displaced by ``init_radius`` in a random direction, or a small random start."""
    rng = np.random.default_rng([cfg.seed, 1])
    m, l = truth.shape
    if cfg.data.init_radius is None:
        return 0.01 * rng.standard_normal((m, l))
    step = rng.standard_normal((m, l))
    return truth + cfg.data.init_radius * step / np.linalg.norm(step, axis=1, keepdims=True)


def initial_state(cfg: RunConfig, data: SyntheticData) -> ClusterState:
    tr = cfg.train
    return server_init(data.root, initial_models(cfg, data.truth), tr.eta_init, tr.server_steps, None, tr.eta,
                       [cfg.seed, 2])


def simulate(cfg: RunConfig, mode: str = "secure", *, attack: bool = True,
             dropped: Iterable[int] = ()) -> RunResult:
    """Train for ``cfg.train.rounds`` rounds with the chosen aggregation.

    ``secure`` runs the encrypted protocol, ``plain`` its plaintext oracle and
    ``fedavg`` the unweighted per-cluster mean, applied as is (server step 1,
    no decay) like standard federated averaging.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    data = build_data(cfg)
    state0 = initial_state(cfg, data)
    dims = cfg.protocol_dims
    dropped = frozenset(dropped)
    if mode == "secure":
        aggregator = SecureAggregator(dims, seed=cfg.seed, dropped=dropped)
    elif dropped:
        raise ValueError("client dropout is only simulated by the secure protocol")
    elif mode == "plain":
        aggregator = plain_aggregator(dims.weighting)
    else:
        aggregator = lambda state, updates, rnd: fedavg_aggregate(state, updates)
    eta_decay = cfg.train.eta_decay
    if mode == "fedavg":
        state0 = replace(state0, eta=1.0)
        eta_decay = 1.0
    adversaries = cfg.adversaries if attack else ()
    hook = attack_hook(cfg.attack, adversaries) if adversaries else None
    state, history = run_rounds(state0, data.clients, cfg.train.rounds, aggregator=aggregator, attack=hook,
                                adversaries=adversaries, eval_tasks=data.tests, truth=data.truth,
                                eta_decay=eta_decay, seed=[cfg.seed, 3])
    return RunResult(config=cfg, mode=mode, data=data, initial=state0, state=state, history=history,
                     aggregator=aggregator)


def twin_runs(cfg: RunConfig, mode: str = "secure") -> tuple[RunResult, RunResult]:
    """The attacked run and its attack-free twin (same seed, same data, same start)."""
    attacked = simulate(cfg, mode)
    clean = simulate(cfg.without_attack(), mode)
    return attacked, clean
