"""Mutually orthogonal matrix families, zero-sum masks and the signed-square maps.

A family is a stack of ``k`` wide blocks of shape ``(r, c)`` cut from the rows of
one ``c x c`` orthogonal matrix, so ``blocks[i] @ blocks[j].T`` is the identity
when ``i == j`` and zero otherwise.  Every masking mechanism in the package
embeds secrets into these blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def child_seeds(seed: SeedLike, count: int) -> list[np.random.SeedSequence]:
    """Independent substreams derived from ``seed`` (no shared RNG state)."""
    if isinstance(seed, np.random.Generator):
        return [np.random.SeedSequence(int(s)) for s in seed.integers(0, 2**63, size=count)]
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return seed.spawn(count)


@dataclass(frozen=True)
class MomaFamily:
    blocks: np.ndarray  # (k, r, c)
    seed: object = None

    def __post_init__(self):
        self.blocks.setflags(write=False)

    @property
    def k(self) -> int:
        return self.blocks.shape[0]

    @property
    def r(self) -> int:
        return self.blocks.shape[1]

    @property
    def c(self) -> int:
        return self.blocks.shape[2]

    def __len__(self) -> int:
        return self.k

    def __getitem__(self, i) -> np.ndarray:
        return self.blocks[i]

    def block_sum(self, indices: Sequence[int] | None = None) -> np.ndarray:
        if indices is None:
            return self.blocks.sum(axis=0)
        return self.blocks[list(indices)].sum(axis=0)

    def gram_error(self) -> float:
        """Max deviation of ``block_i @ block_j.T`` from ``delta_ij * I``."""
        flat = self.blocks.reshape(self.k * self.r, self.c)
        return float(np.max(np.abs(flat @ flat.T - np.eye(self.k * self.r))))


def random_orthogonal(dim: int, seed: SeedLike) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian, sign-fixed diagonal)."""
    rng = as_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def gen_family(k: int, r: int, c: int, seed: SeedLike = None, *, basis: np.ndarray | None = None) -> MomaFamily:
    """Cut ``k`` blocks of ``r`` rows from a ``c x c`` orthogonal matrix.

    ``basis`` replaces the random orthogonal matrix (used by tests to get
    axis-aligned families).
    """
    if min(k, r, c) < 1:
        raise ValueError(f"k, r, c must be positive, got {(k, r, c)}")
    if c < k * r:
        raise ValueError(f"ambient dimension c={c} is smaller than k*r={k * r}")
    if basis is None:
        basis = random_orthogonal(c, seed)
    elif basis.shape != (c, c):
        raise ValueError(f"basis must be {c}x{c}, got {basis.shape}")
    blocks = np.array(basis[: k * r], dtype=np.float64).reshape(k, r, c)
    return MomaFamily(blocks=blocks, seed=seed if not isinstance(seed, np.random.Generator) else None)


def signed_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.sign(a) * a * a


def signed_sqrt(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.sign(a) * np.sqrt(np.abs(a))


@dataclass(frozen=True)
class MaskSet:
    members: np.ndarray  # (n, *shape)
    kind: str  # "zero-sum" or "unit-norm-zero-sum"
    seed: object = None

    def __len__(self) -> int:
        return self.members.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.members[i]

    def total(self) -> np.ndarray:
        return self.members.sum(axis=0)


def gen_zero_sum(n: int, shape, seed: SeedLike = None, *, scale: float = 1.0) -> MaskSet:
    """``n - 1`` Gaussian members plus the negated sum; a single member is zero."""
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    rng = as_rng(seed)
    members = np.empty((n, *shape))
    members[:-1] = scale * rng.standard_normal((n - 1, *shape))
    members[-1] = -members[:-1].sum(axis=0)
    return MaskSet(members=members, kind="zero-sum", seed=seed)


def gen_unit_zero_sum(n: int, dim: int, seed: SeedLike = None) -> MaskSet:
    """Unit vectors on a random plane at the ``n``-th roots of unity (they sum to zero)."""
    if n < 2:
        raise ValueError("unit norm and zero sum are incompatible for a single member")
    if dim < 2:
        raise ValueError("need dim >= 2 to place a plane")
    rng = as_rng(seed)
    u, w = np.linalg.qr(rng.standard_normal((dim, 2)))[0].T
    phase = rng.uniform(0.0, 2.0 * np.pi)
    angles = 2.0 * np.pi * np.arange(n) / n + phase
    members = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w
    # re-centre to remove the O(eps) drift of the trigonometric sum
    members -= members.mean(axis=0)
    members /= np.linalg.norm(members, axis=1, keepdims=True)
    return MaskSet(members=members, kind="unit-norm-zero-sum", seed=seed)


def well_conditioned(dim: int, seed: SeedLike = None, low: float = 0.5, high: float = 2.0) -> np.ndarray:
    """Random orthogonal matrix times a diagonal in ``[low, high]`` (cond <= high/low)."""
    rng = as_rng(seed)
    q = random_orthogonal(dim, rng)
    return q * rng.uniform(low, high, size=dim)
