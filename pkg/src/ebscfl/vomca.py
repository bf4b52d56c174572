"""Verifiable orthogonal-matrix confusion: ciphertexts that decode only in sum.

Client ``i`` hides ``x_i`` as ``x_i M_i + R_i M_{i+n}`` with zero-sum masks
``R_i`` (``r x r``).  The decode key is the sum of all ``2n`` blocks, so a single
ciphertext decodes to ``x_i + R_i`` while the full sum decodes to ``sum x_i``.
The verification key lets the server check that the mask component was not
altered, without learning it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wire
from .moma import MomaFamily, SeedLike, child_seeds, gen_family, gen_zero_sum, well_conditioned

VERIFY_RTOL = 1e-8


@dataclass(frozen=True)
class VomcaKeys:
    family: MomaFamily
    masks: np.ndarray  # (n, r, r), zero-sum
    verifier_masks: np.ndarray  # (n, r, r)
    dk: np.ndarray  # (r, c)
    vk_first: np.ndarray  # (r, c)
    vk_second: np.ndarray  # (n, r, r)

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def to_bytes(self) -> bytes:
        return wire.pack_bundle({
            "family": self.family.blocks,
            "masks": self.masks,
            "verifier_masks": self.verifier_masks,
            "dk": self.dk,
            "vk_first": self.vk_first,
            "vk_second": self.vk_second,
        })

    @classmethod
    def from_bytes(cls, buf: bytes) -> "VomcaKeys":
        items = wire.unpack_bundle(buf)
        return cls(
            family=MomaFamily(blocks=items["family"]),
            masks=items["masks"],
            verifier_masks=items["verifier_masks"],
            dk=items["dk"],
            vk_first=items["vk_first"],
            vk_second=items["vk_second"],
        )


@dataclass(frozen=True)
class Ciphertext:
    value: np.ndarray
    owner: int


def _invertible_zero_sum(n: int, r: int, rng, max_cond: float = 1e6, attempts: int = 100) -> np.ndarray:
    for _ in range(attempts):
        masks = np.empty((n, r, r))
        for i in range(n - 1):
            masks[i] = well_conditioned(r, rng) * rng.choice([-1.0, 1.0])
        masks[-1] = -masks[:-1].sum(axis=0)
        if n == 1 or np.linalg.cond(masks[-1]) < max_cond:
            return masks
    raise RuntimeError("could not draw an invertible zero-sum mask set")


def keygen(n: int, r: int, c: int, seed: SeedLike = None, *, invertible_masks: bool = False,
           family: MomaFamily | None = None) -> VomcaKeys:
    """Keys for ``n`` participants.

    ``invertible_masks`` draws masks suitable for later re-keying (every mask
    must be invertible; impossible for ``n == 1`` where the mask is zero).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if c < 2 * n * r:
        raise ValueError(f"ambient dimension c={c} is smaller than 2*n*r={2 * n * r}")
    s_family, s_masks, s_ver = child_seeds(seed, 3)
    if family is None:
        family = gen_family(2 * n, r, c, s_family)
    elif family.blocks.shape != (2 * n, r, c):
        raise ValueError("family shape does not match (2n, r, c)")
    if invertible_masks:
        if n == 1:
            raise ValueError("a single participant's zero-sum mask is zero and cannot be inverted")
        masks = _invertible_zero_sum(n, r, np.random.default_rng(s_masks))
    else:
        masks = gen_zero_sum(n, (r, r), s_masks).members
    verifier = np.random.default_rng(s_ver).standard_normal((n, r, r))
    blocks = family.blocks
    vk_first = np.einsum("nab,nbc->ac", verifier, blocks[n:])
    vk_second = verifier @ masks.transpose(0, 2, 1)
    return VomcaKeys(
        family=family,
        masks=masks,
        verifier_masks=verifier,
        dk=family.block_sum(),
        vk_first=vk_first,
        vk_second=vk_second,
    )


def _as_secret(x, r: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x * np.eye(r)
    if x.shape != (r, r):
        raise ValueError(f"secret must be a scalar or {r}x{r}, got shape {x.shape}")
    return x


def encode(x, i: int, keys: VomcaKeys) -> Ciphertext:
    n = keys.n
    if not 0 <= i < n:
        raise IndexError(f"participant index {i} out of range for n={n}")
    blocks = keys.family.blocks
    secret = _as_secret(x, keys.family.r)
    return Ciphertext(value=secret @ blocks[i] + keys.masks[i] @ blocks[i + n], owner=i)


def verify(ct: Ciphertext, keys: VomcaKeys, rtol: float = VERIFY_RTOL) -> bool:
    lhs = keys.vk_first @ ct.value.T
    expected = keys.vk_second[ct.owner]
    scale = max(1.0, np.linalg.norm(keys.vk_first) * np.linalg.norm(ct.value))
    return bool(np.all(np.isfinite(lhs)) and np.max(np.abs(lhs - expected)) <= rtol * scale)


def partial_decode(ct: Ciphertext, keys: VomcaKeys) -> np.ndarray:
    """``chi_i @ dk.T``, which equals ``x_i + R_i`` (still masked)."""
    return ct.value @ keys.dk.T


def decode_sum(cts: list[Ciphertext], keys: VomcaKeys) -> np.ndarray:
    owners = sorted(ct.owner for ct in cts)
    if owners != list(range(keys.n)):
        raise ValueError(f"decode needs exactly one ciphertext per participant, got owners {owners}")
    total = np.sum([ct.value for ct in cts], axis=0)
    return total @ keys.dk.T
