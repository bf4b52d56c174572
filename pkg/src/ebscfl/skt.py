"""Re-keying of orthogonally masked ciphertexts into another family.

A ciphertext ``chi_i = x_i M_i + R_i M_{i+n}`` multiplied by

    tk_i = M_i^T M'_{C(i)} + M_{i+n}^T (M'_{C(i+n)} + pinv(R_i) R'_i)

becomes ``x_i M'_{C(i)} + R_i M'_{C(i+n)} + R'_i``.  With fresh masks ``R'``
summing to zero inside a destination group, the group sum decodes under the
destination data blocks.  ``pinv`` is the inverse for square masks and
``R^T / |R|^2`` for row masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .moma import MomaFamily, SeedLike, as_rng, gen_zero_sum
from .vomca import Ciphertext, VomcaKeys


@dataclass(frozen=True)
class TransformKey:
    tk: np.ndarray  # (c_src, c_dst)
    source: int
    data_dest: int
    mask_dest: int


def mask_pinv(mask: np.ndarray) -> np.ndarray:
    mask = np.atleast_2d(mask)
    if mask.shape[0] == mask.shape[1]:
        cond = np.linalg.cond(mask)
        if not np.isfinite(cond) or cond > 1e10:
            raise ValueError(f"source mask is not invertible (cond={cond:.3g})")
        return np.linalg.inv(mask)
    norm2 = float(np.sum(mask * mask))
    if mask.shape[0] != 1 or norm2 < 1e-24:
        raise ValueError("row mask must be a single non-zero row")
    return mask.T / norm2


def transform_matrix(src_data: np.ndarray, src_mask: np.ndarray, dst_data: np.ndarray,
                     dst_mask: np.ndarray, mask: np.ndarray, fresh: np.ndarray) -> np.ndarray:
    """One member's key: data block -> ``dst_data``, mask block -> ``dst_mask`` plus fresh mask."""
    return src_data.T @ dst_data + src_mask.T @ (dst_mask + mask_pinv(mask) @ fresh)


def gen_transform_keys(src_keys: VomcaKeys, dst_family: MomaFamily, mapping: Mapping[int, int] | Sequence[int],
                       groups: Sequence[Sequence[int]] | None = None, seed: SeedLike = None, *,
                       fresh_masks: np.ndarray | None = None) -> tuple[list[TransformKey], np.ndarray]:
    """Keys re-targeting every source ciphertext into ``dst_family``.

    ``mapping`` gives the destination block of each of the ``2n`` source blocks.
    Fresh masks are zero-sum inside each group of ``groups`` (default: one
    group with everyone).  Returns the keys and the fresh masks used.
    """
    n = src_keys.n
    src = src_keys.family
    if src.r != dst_family.r:
        raise ValueError("source and destination families must share the block height")
    mapping = [int(mapping[i]) for i in range(2 * n)]
    if max(mapping) >= dst_family.k or min(mapping) < 0:
        raise ValueError("mapping points outside the destination family")
    if groups is None:
        groups = [list(range(n))]
    if fresh_masks is None:
        rng = as_rng(seed)
        fresh_masks = np.zeros((n, src.r, dst_family.c))
        for group in groups:
            fresh_masks[list(group)] = gen_zero_sum(len(group), (src.r, dst_family.c), rng).members
    keys = []
    for i in range(n):
        tk = transform_matrix(src[i], src[i + n], dst_family[mapping[i]], dst_family[mapping[i + n]],
                              src_keys.masks[i], fresh_masks[i])
        keys.append(TransformKey(tk=tk, source=i, data_dest=mapping[i], mask_dest=mapping[i + n]))
    return keys, fresh_masks


def transform(ct: Ciphertext, tk: TransformKey | np.ndarray) -> Ciphertext:
    mat = tk.tk if isinstance(tk, TransformKey) else tk
    if ct.value.shape[-1] != mat.shape[0]:
        raise ValueError(f"ciphertext width {ct.value.shape[-1]} does not match key rows {mat.shape[0]}")
    return Ciphertext(value=ct.value @ mat, owner=ct.owner)


def group_key(keys: Sequence[TransformKey]) -> np.ndarray:
    """Sum of the members' keys; applying it to any member equals applying its own key."""
    return np.sum([k.tk for k in keys], axis=0)


def decode_key(dst_family: MomaFamily, data_dests: Sequence[int], *, with_multiplicity: bool = False) -> np.ndarray:
    """Sum of destination data blocks, each once (or once per source mapped onto it)."""
    idx = list(data_dests) if with_multiplicity else sorted(set(data_dests))
    return dst_family.block_sum(idx)


def grouped_decode(cts: Sequence[Ciphertext], dk: np.ndarray) -> np.ndarray:
    total = np.sum([ct.value for ct in cts], axis=0)
    return total @ dk.T


def measured_constant(decoded: np.ndarray, plain_sum: np.ndarray) -> float:
    """Least-squares ratio between a grouped decode and the plaintext group sum."""
    plain = np.asarray(plain_sum, dtype=np.float64).ravel()
    dec = np.asarray(decoded, dtype=np.float64).ravel()
    denom = float(plain @ plain)
    if denom == 0.0:
        return float("nan")
    return float(dec @ plain / denom)
