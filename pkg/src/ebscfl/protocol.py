"""Client encoding, server verification, robust weighted aggregation and model update.

The server never sees a cluster index: :class:`EncodedGradient` carries only
the ciphertext rows, the sender and the round.  Cosine weights are computed
under SRFC and folded into the decode key, so the decoded row is the weighted
sum of the clients' cluster-embedded vectors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .kdc import ClientKeys, KeyMaterial, LayerPlan, ProtocolDims, client_vector, plan_segmentation
from .rfca import CLUSTER_EPS, NOOP_EPS, ClusterState
from .srfc import SrfcEncoding, aggregate_encoded_relu, decode_relu_sum
from .vomca import VERIFY_RTOL

logger = logging.getLogger(__name__)

NORM_TARGET = 3.0
NORM_TOL = 1e-6


class RoundAborted(RuntimeError):
    """The round cannot complete (missing or duplicated participants); restart it."""


@dataclass(frozen=True)
class EncodedGradient:
    delta: np.ndarray  # (s, width) one row per lane
    owner: int
    round_id: int = 0

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.delta * self.delta))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""  # "", "vk-check" or "norm-check"


@dataclass(frozen=True)
class AggregationOutcome:
    verdicts: dict[int, Verdict]
    weight_sum: float
    g: np.ndarray  # (s, t*m) decoded weighted row per lane
    cluster_rows: np.ndarray  # (m, width): g A_j^T joined over lanes
    cluster_weights: np.ndarray  # (m,) decoded per-cluster weight sums (nan under global weighting)
    updates: np.ndarray  # (m, l) per-cluster aggregates, comparable to the plaintext rule
    active: np.ndarray  # (m,) bool: clusters that move this round

    @property
    def noop(self) -> bool:
        return not bool(np.any(self.active))

    @property
    def rejected(self) -> dict[int, str]:
        return {i: v.reason for i, v in self.verdicts.items() if not v.accepted}


# --- client -------------------------------------------------------------------


def client_encode(g, j: int, ek: ClientKeys, dims: ProtocolDims, *, round_id: int = 0,
                  normalize: bool = True) -> EncodedGradient:
    """``delta = v A_j ek0 + ek1`` per lane, with ``v`` the client's unit vector.

    ``normalize=False`` skips the division by ``|g|`` (only used to simulate a
    misbehaving client).
    """
    if not 0 <= j < dims.m:
        raise ValueError(f"cluster index {j} out of range for m={dims.m}")
    v = plan_segmentation(dims).split(client_vector(g, dims, normalize=normalize))
    rows = (v[:, None, :] @ ek.A[:, j] @ ek.ek0)[:, 0, :] + ek.ek1
    return EncodedGradient(delta=rows, owner=ek.owner, round_id=round_id)


# --- server -------------------------------------------------------------------


def server_verify(enc: EncodedGradient, km: KeyMaterial, rtol: float = VERIFY_RTOL) -> Verdict:
    """Mask-channel check against ``vk`` on every lane, then the ``|delta|^2 = 3`` gate."""
    if not 0 <= enc.owner < km.dims.n:
        return Verdict(False, "vk-check")
    first = km.vk_first(enc.owner)
    if enc.delta.shape != first.shape or not np.all(np.isfinite(enc.delta)):
        return Verdict(False, "vk-check")
    lhs = np.einsum("kc,kc->k", first, enc.delta)
    expected = km.vk_second(enc.owner)
    scale = np.maximum(1.0, np.linalg.norm(first, axis=1) * np.linalg.norm(enc.delta, axis=1))
    if np.any(np.abs(lhs - expected) > rtol * scale):
        return Verdict(False, "vk-check")
    if abs(enc.norm_sq - NORM_TARGET) > NORM_TOL:
        return Verdict(False, "norm-check")
    return Verdict(True)


def _alpha_coefficients(delta: np.ndarray, km: KeyMaterial, owner: int) -> tuple[list[int], np.ndarray, np.ndarray]:
    gi = km.slot_of[owner][0]
    slots = km.lanes[0].groups[gi].slots
    cd = np.zeros(len(slots))
    cm = np.zeros(len(slots))
    for k in range(len(km.lanes)):
        u, v = km.factor_table[(k, gi)]
        cd += u @ delta[k]
        cm += v @ delta[k]
    present = [p for p, i in enumerate(slots) if i >= 0]
    return [slots[p] for p in present], cd[present], cm[present]


def assemble_alpha(enc: EncodedGradient, km: KeyMaterial) -> SrfcEncoding:
    """SRFC encoding of the client's cosine, contracted from ``delta`` with the factored column keys."""
    clients, cd, cm = _alpha_coefficients(enc.delta, km, enc.owner)
    p_forms, q_forms = km.srfc_forms
    alpha = np.tensordot(cd, p_forms[clients], axes=1) + np.tensordot(cm, q_forms[clients], axes=1)
    return SrfcEncoding(alpha=alpha, owner=enc.owner)


def _check_roster(encs: Sequence[EncodedGradient], km: KeyMaterial) -> None:
    owners = sorted(e.owner for e in encs)
    if owners != list(range(km.dims.n)):
        missing = sorted(set(range(km.dims.n)) - set(owners))
        raise RoundAborted(f"round aborted: expected clients 0..{km.dims.n - 1}, missing {missing}, got {owners}")


def _weights(encs: Sequence[EncodedGradient], km: KeyMaterial, verdicts: dict[int, Verdict]):
    """Verified ciphertext rows per client and the SRFC aggregate; rejected clients get null encodings."""
    deltas, alphas = {}, []
    for e in encs:
        if verdicts[e.owner].accepted:
            deltas[e.owner] = e.delta
            alphas.append(assemble_alpha(e, km))
        else:
            deltas[e.owner] = km.null_delta(e.owner)
            alphas.append(SrfcEncoding(alpha=km.null_alpha(e.owner), owner=e.owner))
    encoded = aggregate_encoded_relu(alphas, km.srfc)
    return deltas, encoded, decode_relu_sum(encoded, km.srfc)


def _noop(km: KeyMaterial, verdicts, weight_sum) -> AggregationOutcome:
    dims = km.dims
    return AggregationOutcome(
        verdicts=verdicts,
        weight_sum=weight_sum,
        g=np.zeros((dims.s, dims.rows)),
        cluster_rows=np.zeros((dims.m, dims.width)),
        cluster_weights=np.zeros(dims.m),
        updates=np.zeros((dims.m, dims.l)),
        active=np.zeros(dims.m, dtype=bool),
    )


def _finish(g: np.ndarray, weight_sum: float, km: KeyMaterial, verdicts) -> AggregationOutcome:
    dims = km.dims
    plan = plan_segmentation(dims)
    lanes = np.stack([np.einsum("jtc,c->jt", lane.A.blocks, g[k]) for k, lane in enumerate(km.lanes)], axis=1)
    rows = plan.join(lanes)  # (m, width)
    updates = np.zeros((dims.m, dims.l))
    if dims.weighting == "cluster":
        weights = rows[:, -1] * math.sqrt(2.0) * weight_sum
        active = weights > CLUSTER_EPS
        for j in np.flatnonzero(active):
            updates[j] = km.g0_norms[j] * rows[j, :-1] / rows[j, -1]
    else:
        weights = np.full(dims.m, np.nan)
        active = np.ones(dims.m, dtype=bool)
        updates = km.g0_norms[:, None] * rows
    return AggregationOutcome(verdicts=verdicts, weight_sum=weight_sum, g=g, cluster_rows=rows,
                              cluster_weights=weights, updates=updates, active=active)


def robust_aggregate(encs: Sequence[EncodedGradient], km: KeyMaterial) -> AggregationOutcome:
    """Verify, weight by ``ReLU(cos)`` under SRFC, decode the weighted sum with ``dk'``."""
    if len(km.lanes[0].groups) != 1:
        raise ValueError("key material is split into client groups; aggregate with run_layered")
    _check_roster(encs, km)
    verdicts = {e.owner: server_verify(e, km) for e in encs}
    for i, v in sorted(verdicts.items()):
        if not v.accepted:
            logger.warning("client %d rejected (%s); a zero contribution is substituted", i, v.reason)
    deltas, encoded, weight_sum = _weights(encs, km, verdicts)
    if weight_sum <= NOOP_EPS:
        return _noop(km, verdicts, weight_sum)
    total = np.sum(list(deltas.values()), axis=0)  # (s, width)
    g = np.stack([total[k] @ (encoded @ dk / weight_sum).T for k, dk in enumerate(km.decode_keys)])
    return _finish(g, weight_sum, km, verdicts)


def run_segmented(grads: Sequence[np.ndarray], clusters: Sequence[int], km: KeyMaterial) -> AggregationOutcome:
    """Encode every client over the lanes of ``km`` and aggregate."""
    encs = [client_encode(g, j, km.client_keys(i), km.dims, round_id=km.round_id)
            for i, (g, j) in enumerate(zip(grads, clusters))]
    return robust_aggregate(encs, km)


def run_layered(encs: Sequence[EncodedGradient], plan: LayerPlan, km: KeyMaterial) -> AggregationOutcome:
    """Group-wise re-keying up the layer tree; only the root is decoded."""
    _check_roster(encs, km)
    verdicts = {e.owner: server_verify(e, km) for e in encs}
    deltas, encoded, weight_sum = _weights(encs, km, verdicts)
    if weight_sum <= NOOP_EPS:
        return _noop(km, verdicts, weight_sum)
    g = []
    for k, lane_plan in enumerate(plan.lanes):
        level = []
        for gi, entry in enumerate(lane_plan.entry):
            slots = km.lanes[k].groups[gi].slots
            present = [p for p, i in enumerate(slots) if i >= 0]
            if not present:
                level.append(np.zeros(entry.mask_map.shape[1]))
                continue
            acc = np.sum([deltas[slots[p]][k] for p in present], axis=0)
            key = entry.mask_map.copy()
            for p in present:
                key += (encoded @ entry.weight_maps[p] / weight_sum).T @ entry.targets[p]
            level.append(acc @ key)
        for lvl, keys in enumerate(lane_plan.transitions):
            fan_in = plan.xi[lvl + 1]
            nxt = [0.0] * (len(keys) // fan_in)
            for gi, tk in enumerate(keys):
                nxt[gi // fan_in] = nxt[gi // fan_in] + level[gi] @ tk
            level = nxt
        (root,) = level
        g.append((root * lane_plan.selector).reshape(-1, plan.rows).sum(axis=0))
    return _finish(np.stack(g), weight_sum, km, verdicts)


def update_models(state: ClusterState, outcome: AggregationOutcome, eta: float | None = None) -> ClusterState:
    """``theta_j += eta * update_j`` for every active cluster."""
    eta = state.eta if eta is None else eta
    if outcome.noop or eta == 0:
        return state
    models = state.models.copy()
    models[outcome.active] += eta * outcome.updates[outcome.active]
    return replace(state, models=models)
