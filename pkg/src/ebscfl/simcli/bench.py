"""Communication and computation scaling measurements.

Clients are benchmarked with a fixed lane width ``t`` and a first layer of
size one, so a client's key bundle holds ``s = (l + 1) / t`` lanes of
``m``-cluster blocks and nothing that depends on ``n``.  Lengths are chosen as
``l = 2^k t - 1`` so the lane count doubles exactly with ``l``.  Encode timing
uses wider lanes (``encode_t``) so arithmetic, not call overhead, dominates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import wire
from ..kdc import ProtocolDims, init_keys
from ..protocol import client_encode, robust_aggregate

# log-log exponents of the reference cost model for one client
EXPECTED_SLOPES = {"bytes_vs_n": 0.0, "bytes_vs_l": 1.0, "encode_vs_l_m1": 1.0}


@dataclass(frozen=True)
class BenchGrid:
    ns: tuple[int, ...]
    ls: tuple[int, ...]
    ms: tuple[int, ...]
    encode_ls: tuple[int, ...]
    t: int = 8
    encode_t: int = 32
    server_ns: tuple[int, ...] = ()
    repeats: int = 20

    def __post_init__(self):
        if max(self.ns) > 64 or max(self.ls + self.encode_ls) > 4096 or max(self.ms) > 4:
            raise ValueError("bench grid exceeds desk scale (n <= 64, l <= 4096, m <= 4)")


GRIDS = {
    "tiny": BenchGrid(ns=(4, 8), ls=(15, 31), ms=(1, 2), encode_ls=(511, 1023, 2047, 4095), server_ns=(4, 8),
                      repeats=8),
    "small": BenchGrid(ns=(8, 16, 32), ls=(63, 127, 255, 511), ms=(1, 2, 3), encode_ls=(511, 1023, 2047, 4095),
                       server_ns=(4, 8, 16)),
}


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def add(self, quantity: str, n: int, m: int, l: int, dims: ProtocolDims, value: float) -> None:
        self.rows.append({"quantity": quantity, "n": n, "m": m, "l": l, "s": dims.s, "t": dims.t, "value": value})

    def select(self, quantity: str, **fixed) -> list[dict]:
        return [r for r in self.rows if r["quantity"] == quantity and all(r[k] == v for k, v in fixed.items())]


def bench_dims(n: int, m: int, l: int, t: int, *, layered: bool = True) -> ProtocolDims:
    s = math.ceil((l + 1) / t)
    return ProtocolDims(n=n, m=m, l=l, s=s, t=t, layers=(1, n) if layered else None)


def _server_updates(m: int, l: int, rng) -> np.ndarray:
    return rng.standard_normal((m, l))


def client_bytes(dims: ProtocolDims, seed=0) -> int:
    """Key bundle delivered to one client plus one encoded gradient message."""
    rng = np.random.default_rng(seed)
    km = init_keys(dims, _server_updates(dims.m, dims.l, rng), rng)
    keys = km.client_keys(0)
    enc = client_encode(rng.standard_normal(dims.l), 0, keys, dims)
    return len(keys.to_bytes()) + len(wire.pack_message(0, 0, wire.PayloadKind.ENCODED_GRADIENT, enc.delta))


def encode_seconds(dims_list: list[ProtocolDims], repeats: int = 20, batch: int = 50, seed=0) -> list[float]:
    """Best-of-``repeats`` time of one client encode for every entry of ``dims_list``.

    Sizes are timed round-robin so slow drift of the machine hits all of them alike.
    """
    setups = []
    for dims in dims_list:
        rng = np.random.default_rng(seed)
        km = init_keys(dims, _server_updates(dims.m, dims.l, rng), rng)
        setups.append((dims, km.client_keys(0), rng.standard_normal((batch, dims.l))))
    best = [math.inf] * len(setups)
    for _ in range(repeats):
        for k, (dims, keys, grads) in enumerate(setups):
            start = time.perf_counter()
            for g in grads:
                client_encode(g, 0, keys, dims)
            best[k] = min(best[k], (time.perf_counter() - start) / batch)
    return best


def server_seconds(dims: ProtocolDims, seed=0) -> dict[str, float]:
    """Key generation and one full aggregation on the direct (single family) path."""
    n, m, l = dims.n, dims.m, dims.l
    rng = np.random.default_rng(seed)
    g0 = _server_updates(m, l, rng)
    start = time.perf_counter()
    km = init_keys(dims, g0, rng)
    t_keys = time.perf_counter()
    encs = [client_encode(rng.standard_normal(l) + g0[i % m], i % m, km.client_keys(i), dims) for i in range(n)]
    _ = km.factor_table, km.srfc_forms, km.decode_keys
    t_prep = time.perf_counter()
    robust_aggregate(encs, km)
    t_agg = time.perf_counter()
    return {"keygen": t_keys - start, "prepare": t_prep - t_keys, "aggregate": t_agg - t_prep}


def loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def bench(grid: BenchGrid | str = "small", seed=0) -> BenchReport:
    grid = GRIDS[grid] if isinstance(grid, str) else grid
    report = BenchReport()
    l0, m0 = grid.ls[0], grid.ms[-1]
    for n in grid.ns:
        dims = bench_dims(n, m0, l0, grid.t)
        report.add("client_bytes", n, m0, l0, dims, client_bytes(dims, seed))
    n0 = grid.ns[0]
    for m in grid.ms:
        for l in grid.ls:
            dims = bench_dims(n0, m, l, grid.t)
            report.add("client_bytes", n0, m, l, dims, client_bytes(dims, seed))
    enc_dims = [bench_dims(2, 1, l, grid.encode_t) for l in grid.encode_ls]
    for dims, sec in zip(enc_dims, encode_seconds(enc_dims, grid.repeats, seed=seed)):
        report.add("encode_seconds", 2, 1, dims.l, dims, sec)
    for n in grid.server_ns:
        dims = bench_dims(n, 2, grid.ls[0], grid.t, layered=False)
        for phase, sec in server_seconds(dims, seed).items():
            report.add(f"server_{phase}_seconds", n, 2, grid.ls[0], dims, sec)

    by_n = report.select("client_bytes", m=m0, l=l0)
    report.slopes["bytes_vs_n"] = loglog_slope([r["n"] for r in by_n], [r["value"] for r in by_n])
    by_l = report.select("client_bytes", n=n0, m=m0)
    report.slopes["bytes_vs_l"] = loglog_slope([r["l"] + 1 for r in by_l], [r["value"] for r in by_l])
    if len(grid.ms) > 1:
        by_m = report.select("client_bytes", n=n0, l=grid.ls[-1])
        report.slopes["bytes_vs_m"] = loglog_slope([r["m"] for r in by_m], [r["value"] for r in by_m])
    enc = report.select("encode_seconds")
    report.slopes["encode_vs_l_m1"] = loglog_slope([r["l"] + 1 for r in enc], [r["value"] for r in enc])
    if len(grid.server_ns) > 1:
        agg = report.select("server_aggregate_seconds")
        report.slopes["server_aggregate_vs_n"] = loglog_slope([r["n"] for r in agg], [r["value"] for r in agg])
    return report


def trends_hold(report: BenchReport) -> dict[str, bool]:
    """Client bytes flat in ``n`` (5%) and linear in ``l`` (10%), encode slope ``1 +- 0.2`` at ``m = 1``."""
    checks = {}
    by_n = [r["value"] for r in report.select("client_bytes") if r["l"] == report.rows[0]["l"]
            and r["m"] == report.rows[0]["m"]]
    checks["bytes_flat_in_n"] = max(by_n) <= 1.05 * min(by_n)
    by_l = sorted((r["l"] + 1, r["value"]) for r in report.select("client_bytes", n=report.rows[0]["n"],
                                                                  m=report.rows[0]["m"]))
    ratios = [(b2 / b1) / (l2 / l1) for (l1, b1), (l2, b2) in zip(by_l, by_l[1:])]
    checks["bytes_linear_in_l"] = bool(ratios) and all(abs(r - 1.0) <= 0.10 for r in ratios)
    checks["encode_slope_m1"] = abs(report.slopes["encode_vs_l_m1"] - 1.0) <= 0.2
    return checks
