"""Flat binary layout shared by key files, fixtures and simulated messages.

Matrix record::

    u32 ndim | u64 dim_0 ... u64 dim_{ndim-1} | float64 data (row-major, little-endian)

Bundle (key files)::

    b"EBSK" | u32 count | count x (u16 name_len | utf-8 name | matrix record)

Message (entity-to-entity)::

    16-byte header: u64 round_id | u32 sender_id | u32 payload_kind
    followed by one matrix record
"""

from __future__ import annotations

import enum
import struct
from typing import Mapping

import numpy as np

BUNDLE_MAGIC = b"EBSK"
HEADER = struct.Struct("<QII")


class PayloadKind(enum.IntEnum):
    ENCODED_GRADIENT = 1
    ENCODE_KEY = 2
    MASK_KEY = 3
    CLUSTER_CHANNELS = 4
    VERIFY_KEY = 5
    DECODE_KEY = 6
    ALPHA_KEY = 7
    SRFC_PARAMS = 8
    TRANSFORM_KEY = 9
    MODEL = 10


def pack_matrix(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")
    dims = struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape)
    return dims + a.tobytes()


def unpack_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    return data.astype(np.float64), offset + 8 * count


def pack_bundle(items: Mapping[str, np.ndarray]) -> bytes:
    out = [BUNDLE_MAGIC, struct.pack("<I", len(items))]
    for name, arr in items.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(pack_matrix(arr))
    return b"".join(out)


def unpack_bundle(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != BUNDLE_MAGIC:
        raise ValueError("not a key bundle")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    items = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode()
        offset += nlen
        items[name], offset = unpack_matrix(buf, offset)
    return items


def pack_message(round_id: int, sender_id: int, kind: PayloadKind, arr) -> bytes:
    return HEADER.pack(round_id, sender_id, int(kind)) + pack_matrix(arr)


def unpack_message(buf: bytes) -> tuple[int, int, PayloadKind, np.ndarray]:
    round_id, sender_id, kind = HEADER.unpack_from(buf, 0)
    arr, _ = unpack_matrix(buf, HEADER.size)
    return round_id, sender_id, PayloadKind(kind), arr


def float_count(buf: bytes) -> int:
    """Number of float64 payload entries in a bundle (names and dims excluded)."""
    return sum(a.size for a in unpack_bundle(buf).values())
