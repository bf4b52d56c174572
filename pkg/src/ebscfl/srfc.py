"""Secure ReLU-sum computation over orthogonally masked scalars.

Each participant ``i`` contributes ``alpha_i = x_i M_i^T R'_i M_i + M_{i+n}^T R'_i M_{i+n}``
(``c x c``).  With the public parameters ``beta, tau_1, tau_2, tau_3`` the
aggregator evaluates

    1/2 * (beta (sum alpha_i) tau_1
           + sum_i Finv(beta alpha_i^2 tau_2 + Finv(beta alpha_i^2 tau_3)))

which equals ``sum_i ReLU(x_i) M_i + 1/2 zeta_i M_{i+n}``; its trace against
``beta`` divided by the block height yields ``sum_i ReLU(x_i)``.

The sign placement inside ``tau_2``/``tau_3`` is resolved by
:func:`calibrate_signs`, which tries every placement on a small probe and keeps
the one under which the whole identity ladder holds.
"""

from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .moma import (
    MomaFamily,
    SeedLike,
    as_rng,
    child_seeds,
    gen_family,
    gen_zero_sum,
    signed_sqrt,
    signed_square,
    well_conditioned,
)

logger = logging.getLogger(__name__)

PROBE_TOL = 1e-8
# Sparse randoms are drawn from the low end of their admissible ranges.  R1
# must stay above bound*|M| so that |x| M + R1 > 0; beyond that, the absolute
# rounding noise of the tau_2 / tau_3 products scales with R1^2 and R2^2, and
# the signed square roots amplify it on entries where |x| M is tiny.
R1_SPAN = (0.2, 0.4)  # R1 = bound * (|M| + (1 - |M|) * U(R1_SPAN))
R2_SPAN = (0.0025, 0.01)  # R2 = 2 bound^2 * U(R2_SPAN)


@dataclass(frozen=True)
class SignConfig:
    """Signs of the four sign-ambiguous terms in ``tau_2`` and ``tau_3``."""

    tau2_r1sq: int = 1
    tau2_r2: int = 1
    tau3_mr1: int = 1
    tau3_r2: int = -1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.tau2_r1sq, self.tau2_r2, self.tau3_mr1, self.tau3_r2)


@dataclass(frozen=True)
class SrfcParams:
    family: MomaFamily  # 2n blocks (r, c)
    beta: np.ndarray  # (r, c)
    tau1: np.ndarray  # (c, c)
    tau2: np.ndarray
    tau3: np.ndarray
    rprime: np.ndarray  # (n, r, r)
    zeta: np.ndarray  # (n, r, r), zero-sum
    r0: np.ndarray  # (n, r, c)
    r1: np.ndarray  # (n, r, c), sign-conditioned
    r2: np.ndarray  # (n, r, c), sign-conditioned
    bound: float
    signs: SignConfig

    @property
    def n(self) -> int:
        return self.rprime.shape[0]

    @property
    def r(self) -> int:
        return self.family.r

    @property
    def c(self) -> int:
        return self.family.c

    def data_form(self, i: int) -> np.ndarray:
        """``M_i^T R'_i M_i`` (the part of ``alpha_i`` scaled by the secret)."""
        m = self.family.blocks[i]
        return m.T @ (self.rprime[i] @ m)

    def mask_form(self, i: int) -> np.ndarray:
        """``M_{i+n}^T R'_i M_{i+n}``."""
        m = self.family.blocks[i + self.n]
        return m.T @ (self.rprime[i] @ m)


@dataclass(frozen=True)
class SrfcEncoding:
    alpha: np.ndarray
    owner: int


def sparse_randoms(blocks: np.ndarray, bound: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sign-conditioned randoms: R1 lives on ``M <= 0``, R2 on ``M > 0``."""
    nonpos = blocks <= 0
    mag = np.abs(blocks)
    u = rng.uniform(*R1_SPAN, size=blocks.shape)
    r1 = np.where(nonpos, bound * (mag + (1.0 - mag) * u), 0.0)
    r2 = np.where(nonpos, 0.0, rng.uniform(*R2_SPAN, size=blocks.shape) * 2.0 * bound * bound)
    return r1, r2


def _build_taus(blocks, rp_inv, r0, r1, r2, zeta, signs: SignConfig):
    n = rp_inv.shape[0]
    data, mask = blocks[:n], blocks[n:]
    rp_inv2 = rp_inv @ rp_inv

    def contract(left_blocks, inner):
        # sum_k left_k^T @ inner_k
        return np.einsum("kra,krb->ab", left_blocks, inner, optimize=True)

    tau1 = contract(data, rp_inv @ data) + contract(mask, rp_inv @ (r0 + zeta @ mask))
    tau2 = contract(data, rp_inv2 @ (data * data)) + contract(
        mask, rp_inv2 @ (signs.tau2_r1sq * r1 * r1 + signs.tau2_r2 * r2))
    tau3 = signs.tau3_mr1 * contract(data, rp_inv2 @ signed_square(2.0 * data * r1)) + signs.tau3_r2 * contract(
        mask, rp_inv2 @ signed_square(r2))
    return tau1, tau2, tau3


def gen_params(n: int, r: int, bound: float, seed: SeedLike = None, *, c: int | None = None,
               family: MomaFamily | None = None, signs: SignConfig | None = None) -> SrfcParams:
    if bound <= 0:
        raise ValueError("bound must be positive")
    if n < 1 or r < 1:
        raise ValueError("n and r must be positive")
    c = 2 * n * r if c is None else c
    if signs is None:
        signs = frozen_signs()
    s_fam, s_rp, s_zeta, s_r, s_sparse = child_seeds(seed, 5)
    if family is None:
        family = gen_family(2 * n, r, c, s_fam)
    elif family.blocks.shape != (2 * n, r, c):
        raise ValueError("family shape does not match (2n, r, c)")
    blocks = family.blocks
    rng_rp = as_rng(s_rp)
    rprime = np.stack([well_conditioned(r, rng_rp) for _ in range(n)])
    rp_inv = np.linalg.inv(rprime)
    zeta = gen_zero_sum(n, (r, r), s_zeta).members
    big_r = gen_zero_sum(n, (r, c), s_r).members
    r1, r2 = sparse_randoms(blocks[:n], bound, as_rng(s_sparse))
    r0 = big_r - r1
    tau1, tau2, tau3 = _build_taus(blocks, rp_inv, r0, r1, r2, zeta, signs)
    return SrfcParams(
        family=family,
        beta=family.block_sum(),
        tau1=tau1,
        tau2=tau2,
        tau3=tau3,
        rprime=rprime,
        zeta=zeta,
        r0=r0,
        r1=r1,
        r2=r2,
        bound=float(bound),
        signs=signs,
    )


def encode_alpha(x: float, i: int, params: SrfcParams) -> SrfcEncoding:
    if not 0 <= i < params.n:
        raise IndexError(f"participant index {i} out of range for n={params.n}")
    if not abs(x) < params.bound:
        raise ValueError(f"|x|={abs(x)} must be below the bound {params.bound}")
    return SrfcEncoding(alpha=x * params.data_form(i) + params.mask_form(i), owner=i)


def _beta_alpha_sq(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # beta @ alpha @ alpha without forming the c x c square
    return (beta @ alpha) @ alpha


def relu_branch(alpha: np.ndarray, params: SrfcParams) -> np.ndarray:
    """``Finv(beta a^2 tau_2 + Finv(beta a^2 tau_3))`` for one participant."""
    ba2 = _beta_alpha_sq(alpha, params.beta)
    inner = signed_sqrt(ba2 @ params.tau3)
    return signed_sqrt(ba2 @ params.tau2 + inner)


def aggregate_encoded_relu(encodings: list[SrfcEncoding], params: SrfcParams) -> np.ndarray:
    owners = sorted(e.owner for e in encodings)
    if owners != list(range(params.n)):
        raise ValueError(f"need one encoding per participant (n={params.n}), got owners {owners}")
    alpha_sum = np.sum([e.alpha for e in encodings], axis=0)
    linear = (params.beta @ alpha_sum) @ params.tau1
    branches = sum(relu_branch(e.alpha, params) for e in encodings)
    return 0.5 * (linear + branches)


def decode_relu_sum(encoded: np.ndarray, params: SrfcParams) -> float:
    if encoded.shape != params.beta.shape:
        raise ValueError(f"encoded shape {encoded.shape} != {params.beta.shape}")
    return float(np.trace(encoded @ params.beta.T) / params.r)


# --- identity ladder ---------------------------------------------------------


def ladder_residuals(xs, params: SrfcParams) -> dict[str, float]:
    """Max-abs residual of each intermediate identity for secrets ``xs``.

    ``linear``: ``beta alpha_i tau_1 = x_i M_i + R0_i + zeta_i M_{i+n}``;
    ``cubic``: ``Finv(beta alpha_i^2 tau_3) = 2|x_i| M_i o R1_i - R2_i``;
    ``branch``: ``relu_branch(alpha_i) = |x_i| M_i + R1_i``;
    ``assembly``: the aggregate equals ``sum ReLU(x_i) M_i + 1/2 zeta_i M_{i+n}``.
    """
    n = params.n
    blocks = params.family.blocks
    res = {"linear": 0.0, "cubic": 0.0, "branch": 0.0, "assembly": 0.0}
    encodings = []
    expected_total = np.zeros_like(params.beta)
    for i, x in enumerate(xs):
        enc = encode_alpha(x, i, params)
        encodings.append(enc)
        m_i, m_mask = blocks[i], blocks[i + n]
        lin = params.beta @ enc.alpha @ params.tau1
        lin_exp = x * m_i + params.r0[i] + params.zeta[i] @ m_mask
        ba2 = _beta_alpha_sq(enc.alpha, params.beta)
        cub = signed_sqrt(ba2 @ params.tau3)
        cub_exp = 2.0 * abs(x) * m_i * params.r1[i] - params.r2[i]
        br = relu_branch(enc.alpha, params)
        br_exp = abs(x) * m_i + params.r1[i]
        res["linear"] = max(res["linear"], float(np.max(np.abs(lin - lin_exp))))
        res["cubic"] = max(res["cubic"], float(np.max(np.abs(cub - cub_exp))))
        res["branch"] = max(res["branch"], float(np.max(np.abs(br - br_exp))))
        expected_total += max(x, 0.0) * m_i + 0.5 * params.zeta[i] @ m_mask
    agg = aggregate_encoded_relu(encodings, params)
    res["assembly"] = float(np.max(np.abs(agg - expected_total)))
    return res


@dataclass(frozen=True)
class CalibrationReport:
    chosen: SignConfig
    residuals: dict[tuple[int, int, int, int], dict[str, float]]


def calibrate_signs(n: int = 3, r: int = 2, bound: float = 1.01, seed: SeedLike = 20240,
                    tol: float = PROBE_TOL) -> CalibrationReport:
    """Try every sign placement on a mixed-sign probe; keep the one passing the ladder."""
    if n > 3 or r > 4:
        raise ValueError("calibration probes are limited to n <= 3, r <= 4")
    rng = as_rng(seed)
    xs = rng.uniform(-bound, bound, size=n) * 0.95
    xs[0] = abs(xs[0])
    if n > 1:
        xs[1] = -abs(xs[1])
    probe_seed = int(rng.integers(2**31))
    residuals = {}
    passing = []
    for combo in itertools.product((1, -1), repeat=4):
        cfg = SignConfig(*combo)
        params = gen_params(n, r, bound, probe_seed, signs=cfg)
        res = ladder_residuals(xs, params)
        residuals[combo] = res
        if max(res.values()) <= tol:
            passing.append(cfg)
    if not passing:
        table = "\n".join(f"  {k}: {v}" for k, v in residuals.items())
        raise RuntimeError(f"no sign placement satisfies the identity ladder:\n{table}")
    chosen = passing[0]
    logger.info("SRFC sign calibration chose %s (%d of 16 placements pass)", chosen.as_tuple(), len(passing))
    return CalibrationReport(chosen=chosen, residuals=residuals)


@functools.lru_cache(maxsize=1)
def frozen_signs() -> SignConfig:
    return calibrate_signs().chosen
