"""Accuracy bookkeeping and attack-impact metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..rfca import History


def attack_impact_rate(fa: float, ma: float, na: float) -> float:
    """``(2 NA - FA - MA) / (2 NA)``; NaN when ``NA`` is zero."""
    if na == 0 or not math.isfinite(na):
        return math.nan
    return (2.0 * na - fa - ma) / (2.0 * na)


def attack_success_rate(successful: int, total: int) -> float:
    if total == 0:
        return math.nan
    return successful / total


def successful_attackers(weights: np.ndarray, adversaries: Sequence[int]) -> np.ndarray:
    """Boolean per adversary: its weight beat the mean honest weight in at least one round.

    ``weights`` is ``(rounds, n)``.
    """
    weights = np.atleast_2d(weights)
    adv = np.asarray(sorted(adversaries), dtype=int)
    honest = np.setdiff1d(np.arange(weights.shape[1]), adv)
    if adv.size == 0:
        return np.zeros(0, dtype=bool)
    if honest.size == 0:
        return np.ones(adv.size, dtype=bool)
    bar = weights[:, honest].mean(axis=1, keepdims=True)
    return np.any(weights[:, adv] > bar, axis=0)


@dataclass(frozen=True)
class MetricsRow:
    round: int
    loss: tuple[float, ...]  # per cluster
    accuracy: tuple[float, ...]  # per cluster
    param_error: tuple[float, ...]  # per cluster
    fa: float
    ma: float
    asr: float
    air: float
    client_bytes: int
    server_bytes: int
    seconds: dict  # wall time per phase, cumulative for the round


def final_accuracy(history: History) -> float:
    return float(np.nanmean(history.rounds[-1].accuracy))


def compute_metrics(history: History, na_reference: float | None = None, adversaries: Sequence[int] = (), *,
                    client_bytes: Sequence[int] | None = None, server_bytes: Sequence[int] | None = None,
                    seconds: Sequence[dict] | None = None) -> list[MetricsRow]:
    """Per-round rows; FA is the current mean accuracy and MA its running maximum.

    ASR and AIR are NaN without attackers or without a no-attack reference.
    """
    rows = []
    ma = -math.inf
    weights = history.series("weights")
    for k, rec in enumerate(history.rounds):
        fa = float(np.nanmean(rec.accuracy))
        ma = max(ma, fa)
        if adversaries:
            asr = attack_success_rate(int(successful_attackers(weights[: k + 1], adversaries).sum()),
                                      len(adversaries))
        else:
            asr = math.nan
        air = attack_impact_rate(fa, ma, na_reference) if na_reference is not None else math.nan
        rows.append(MetricsRow(
            round=rec.round,
            loss=tuple(float(x) for x in rec.losses),
            accuracy=tuple(float(x) for x in rec.accuracy),
            param_error=tuple(float(x) for x in rec.param_error),
            fa=fa, ma=ma, asr=asr, air=air,
            client_bytes=int(client_bytes[k]) if client_bytes is not None else 0,
            server_bytes=int(server_bytes[k]) if server_bytes is not None else 0,
            seconds=dict(seconds[k]) if seconds is not None else {},
        ))
    return rows
