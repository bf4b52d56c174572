"""Secure pipeline versus the plaintext aggregation rule on random instances."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from ..kdc import ProtocolDims, init_keys, plan_layers
from ..protocol import AggregationOutcome, client_encode, robust_aggregate, run_layered
from ..rfca import ClientUpdate, ClusterState, PlainAggregate, aggregate_plain


@dataclass(frozen=True)
class EquivalenceCase:
    n: int
    m: int
    l: int
    seed: int
    s: int
    layers: tuple[int, ...] | None
    weighting: str
    max_rel_error: float  # worst per-cluster relative error over active clusters
    weight_error: float  # |decoded weight sum - plaintext weight sum|
    active_match: bool
    all_accepted: bool

    def ok(self, tol: float = 1e-6) -> bool:
        return self.active_match and self.all_accepted and self.max_rel_error <= tol


def random_instance(n: int, m: int, l: int, seed: int):
    """Server updates, client gradients and cluster choices drawn from ``[n, m, l, seed]``."""
    rng = np.random.default_rng([n, m, l, seed])
    g0 = rng.standard_normal((m, l))
    grads = rng.standard_normal((n, l))
    clusters = rng.integers(0, m, n)
    return rng, g0, grads, clusters


def secure_outcome(dims: ProtocolDims, g0, grads, clusters, rng) -> AggregationOutcome:
    km = init_keys(dims, g0, rng)
    encs = [client_encode(g, int(j), km.client_keys(i), dims) for i, (g, j) in enumerate(zip(grads, clusters))]
    if dims.layers:
        return run_layered(encs, plan_layers(km, rng), km)
    return robust_aggregate(encs, km)


def plain_outcome(dims: ProtocolDims, g0, grads, clusters) -> PlainAggregate:
    state = ClusterState(models=np.zeros((dims.m, dims.l)), server_updates=g0, eta=1.0)
    updates = [ClientUpdate(int(j), g) for g, j in zip(grads, clusters)]
    return aggregate_plain(state, updates, weighting=dims.weighting)


def compare(secure: AggregationOutcome, plain: PlainAggregate) -> tuple[float, float, bool]:
    worst = 0.0
    for j in np.flatnonzero(plain.active & secure.active):
        ref = float(np.linalg.norm(plain.updates[j]))
        err = float(np.linalg.norm(secure.updates[j] - plain.updates[j]))
        worst = max(worst, err / ref if ref > 0 else err)
    weight_err = abs(secure.weight_sum - float(plain.weights.sum()))
    return worst, weight_err, bool(np.array_equal(secure.active, plain.active))


def run_case(n: int, m: int, l: int, seed: int, *, s: int = 1, layers: Sequence[int] | None = None,
             weighting: str = "cluster") -> EquivalenceCase:
    dims = ProtocolDims(n=n, m=m, l=l, s=s, layers=tuple(layers) if layers else None, weighting=weighting)
    rng, g0, grads, clusters = random_instance(n, m, l, seed)
    sec = secure_outcome(dims, g0, grads, clusters, rng)
    worst, werr, match = compare(sec, plain_outcome(dims, g0, grads, clusters))
    return EquivalenceCase(n=n, m=m, l=l, seed=seed, s=s, layers=dims.layers, weighting=weighting,
                           max_rel_error=worst, weight_error=werr, active_match=match,
                           all_accepted=all(v.accepted for v in sec.verdicts.values()))


def run_grid(ns: Iterable[int], ms: Iterable[int], ls: Iterable[int], seeds: Iterable[int], **kwargs
             ) -> list[EquivalenceCase]:
    seeds = list(seeds)
    return [run_case(n, m, l, seed, **kwargs) for n, m, l in product(ns, ms, ls) for seed in seeds]
