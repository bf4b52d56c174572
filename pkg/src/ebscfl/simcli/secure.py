"""Adapter running the encrypted protocol inside the plaintext training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import wire
from ..kdc import KeyMaterial, ProtocolDims, init_keys, plan_layers, refresh_round
from ..protocol import AggregationOutcome, EncodedGradient, client_encode, robust_aggregate, run_layered
from ..rfca import ClientUpdate, ClusterState, PlainAggregate, cosine_weights


@dataclass
class RoundTrace:
    outcome: AggregationOutcome
    upload_bytes: int  # one client's ciphertext message
    broadcast_bytes: int  # models sent to one client
    seconds: dict


@dataclass
class SecureAggregator:
    """Callable ``(state, updates, round) -> PlainAggregate`` backed by the secure protocol.

    Keys are issued on the first call from the server updates of the state and
    the zero-sum round masks are refreshed on every later round.  ``dropped``
    clients never submit, which aborts the round.  The per-client weights in
    the returned aggregate come from the simulator's plaintext view and only
    feed the metric traces.
    """

    dims: ProtocolDims
    seed: int = 0
    dropped: frozenset[int] = frozenset()
    km: KeyMaterial | None = None
    traces: list[RoundTrace] = field(default_factory=list)

    def _keys(self, state: ClusterState, rnd: int) -> KeyMaterial:
        if self.km is None:
            self.km = init_keys(self.dims, state.server_updates, [self.seed, 0])
        else:
            self.km = refresh_round(self.km, [self.seed, 1, rnd])
        return self.km

    def encode_all(self, updates: Sequence[ClientUpdate], km: KeyMaterial) -> list[EncodedGradient]:
        encs = []
        for i, u in enumerate(updates):
            if i in self.dropped:
                continue
            if not np.any(u.gradient):
                # nothing to normalise: the client submits its mask alone and is filtered out
                encs.append(EncodedGradient(delta=km.null_delta(i), owner=i, round_id=km.round_id))
                continue
            encs.append(client_encode(u.gradient, u.cluster, km.client_keys(i), self.dims, round_id=km.round_id))
        return encs

    def __call__(self, state: ClusterState, updates: Sequence[ClientUpdate], rnd: int) -> PlainAggregate:
        if len(updates) != self.dims.n:
            raise ValueError(f"expected {self.dims.n} updates, got {len(updates)}")
        clock = time.perf_counter()
        km = self._keys(state, rnd)
        plan = plan_layers(km, [self.seed, 2, rnd]) if self.dims.layers else None
        t_keys = time.perf_counter()
        encs = self.encode_all(updates, km)
        t_enc = time.perf_counter()
        outcome = run_layered(encs, plan, km) if plan is not None else robust_aggregate(encs, km)
        t_agg = time.perf_counter()
        upload = len(wire.pack_message(km.round_id, 0, wire.PayloadKind.ENCODED_GRADIENT, encs[0].delta)) if encs else 0
        broadcast = len(wire.pack_message(km.round_id, 0, wire.PayloadKind.MODEL, state.models))
        self.traces.append(RoundTrace(
            outcome=outcome, upload_bytes=upload, broadcast_bytes=broadcast,
            seconds={"keys": t_keys - clock, "encode": t_enc - t_keys, "aggregate": t_agg - t_enc},
        ))
        return PlainAggregate(updates=outcome.updates, weights=cosine_weights(state, updates),
                              cluster_weights=outcome.cluster_weights, active=outcome.active)
