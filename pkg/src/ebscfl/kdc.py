"""Key distribution center: protocol key material, round refresh and compression plans.

Every client ``i`` works in a *client family* with three channels per slot:
``D`` carries the encoded gradient, ``K`` the cluster-mask row
``sum_j R''_ij A_j`` and ``U`` the unit mask ``mu_i``.  Without layering all
clients share one family of ``3n`` blocks; with layering each first-stage
group of ``xi_1`` clients gets its own family.

Gradients are processed in ``s`` lanes (segments) of length ``t``; each lane
has its own cluster embedding ``A``, client families and masks, while a single
SRFC instance with block height ``t*m`` computes the robustness weights.

In ``"cluster"`` weighting the client vector is ``(g_hat, 1) / sqrt(2)`` so the
decoded row carries each cluster's weight sum in its last coordinate; this
gives per-cluster normalisation.  ``"global"`` weighting encodes ``g_hat`` alone
and normalises every cluster by the total weight.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import wire
from .rfca import CLUSTER_EPS, NOOP_EPS  # noqa: F401  (re-exported)
from .moma import MomaFamily, SeedLike, as_rng, child_seeds, gen_family, gen_unit_zero_sum, gen_zero_sum
from .skt import mask_pinv
from .srfc import SrfcParams, gen_params

SRFC_BOUND = 1.01
# mask rows below this norm are treated as cancelled (a subtree covering every client)
LIVE_MASK_NORM = 1e-9
WEIGHTINGS = ("cluster", "global")


@dataclass(frozen=True)
class ProtocolDims:
    n: int
    m: int
    l: int
    s: int = 1
    t: int | None = None
    layers: tuple[int, ...] | None = None
    weighting: str = "cluster"

    def __post_init__(self):
        if min(self.n, self.m, self.l, self.s) < 1:
            raise ValueError(f"n, m, l, s must be positive: {self}")
        if self.n < 2:
            raise ValueError("unit-norm zero-sum masks need at least two clients")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.t is None:
            object.__setattr__(self, "t", math.ceil(self.width / self.s))
        if self.t < 1 or self.s * self.t < self.width:
            raise ValueError(f"s*t={self.s * self.t} does not cover the encoded width {self.width}")
        if self.s * self.t < 2:
            raise ValueError("encoded lanes need at least two coordinates")
        if self.layers is not None:
            layers = tuple(int(x) for x in self.layers)
            if not layers or min(layers) < 1:
                raise ValueError("layer sizes must be positive")
            if math.prod(layers) < self.n:
                raise ValueError(f"prod(layers)={math.prod(layers)} < n={self.n}")
            object.__setattr__(self, "layers", layers)

    @property
    def width(self) -> int:
        """Length of the encoded client vector (``l + 1`` under cluster weighting)."""
        return self.l + 1 if self.weighting == "cluster" else self.l

    @property
    def rows(self) -> int:
        """Block height ``t*m`` shared by every family of a lane."""
        return self.t * self.m

    @property
    def group_size(self) -> int:
        return self.layers[0] if self.layers else self.n

    @property
    def slots(self) -> int:
        return math.prod(self.layers) if self.layers else self.n


# --- segmentation --------------------------------------------------------------


@dataclass(frozen=True)
class SegmentPlan:
    s: int
    t: int
    width: int

    @property
    def padded(self) -> int:
        return self.s * self.t

    @property
    def mu_norm(self) -> float:
        """Per-lane norm of ``mu`` so that the squared norms add to one."""
        return 1.0 / math.sqrt(self.s)

    def split(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] > self.padded:
            raise ValueError(f"vector of length {vec.shape[-1]} exceeds s*t={self.padded}")
        out = np.zeros(vec.shape[:-1] + (self.padded,))
        out[..., : vec.shape[-1]] = vec
        return out.reshape(*vec.shape[:-1], self.s, self.t)

    def join(self, rows) -> np.ndarray:
        rows = np.asarray(rows)
        return rows.reshape(*rows.shape[:-2], self.padded)[..., : self.width]


def plan_segmentation(dims: ProtocolDims) -> SegmentPlan:
    return SegmentPlan(s=dims.s, t=dims.t, width=dims.width)


def segment_inner_products(a, b, plan: SegmentPlan) -> np.ndarray:
    """Per-segment inner products; their sum is the full inner product."""
    return np.einsum("...st,...st->...s", plan.split(a), plan.split(b))


# --- embedding ----------------------------------------------------------------


def client_vector(g, dims: ProtocolDims, *, normalize: bool = True) -> np.ndarray:
    """The unit vector a client encodes for gradient ``g``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (dims.l,):
        raise ValueError(f"gradient must have length {dims.l}, got shape {g.shape}")
    norm = math.sqrt(g @ g)
    if not math.isfinite(norm) or norm == 0.0:
        raise ValueError("gradient must be finite and non-zero")
    g_hat = g / norm if normalize else g
    if dims.weighting == "cluster":
        out = np.empty(dims.l + 1)
        out[:-1] = g_hat
        out[-1] = 1.0
        return out / math.sqrt(2.0)
    return g_hat


def reference_vector(g0, dims: ProtocolDims) -> np.ndarray:
    """Embedded normalised server update; its inner product with a client vector is the cosine."""
    g0 = np.asarray(g0, dtype=np.float64)
    g0_hat = g0 / np.linalg.norm(g0)
    if dims.weighting == "cluster":
        return np.append(g0_hat, 0.0) * math.sqrt(2.0)
    return g0_hat


# --- key material ---------------------------------------------------------------


@dataclass(frozen=True)
class ClientGroup:
    """One client family: slots ``p`` use blocks ``p`` (data), ``p+size`` (K) and ``p+2*size`` (U)."""

    family: MomaFamily
    slots: tuple[int, ...]  # client index per slot, -1 when absent
    verifier: np.ndarray  # (size, t)
    vk_first: np.ndarray  # (3*rows*size,)

    @property
    def size(self) -> int:
        return len(self.slots)

    def data(self, p: int) -> np.ndarray:
        return self.family[p]

    def mask(self, p: int) -> np.ndarray:
        return self.family[p + self.size]

    def noise(self, p: int) -> np.ndarray:
        return self.family[p + 2 * self.size]


@dataclass(frozen=True)
class LaneKeys:
    A: MomaFamily  # m blocks (t, t*m)
    groups: tuple[ClientGroup, ...]
    reference: np.ndarray  # (m, t) lane of each embedded server update
    r2: np.ndarray  # (n, m, t): R''_ij for this lane
    mu: np.ndarray  # (n, t*m)

    @functools.cached_property
    def h(self) -> np.ndarray:
        """``sum_q A_q^T ref_q``: pairing a client's data row with it yields the lane cosine."""
        return np.einsum("qtc,qt->c", self.A.blocks, self.reference)

    def mask_row(self, i: int) -> np.ndarray:
        """``sum_j R''_ij A_j`` (length ``t*m``)."""
        return np.einsum("jt,jtc->c", self.r2[i], self.A.blocks)


@dataclass(frozen=True)
class ClientKeys:
    """What client ``i`` receives: the cluster embedding and its two encode keys per lane."""

    owner: int
    A: np.ndarray  # (s, m, t, t*m) cluster embedding per lane
    ek0: np.ndarray  # (s, t*m, width_group)
    ek1: np.ndarray  # (s, width_group)

    def to_bytes(self) -> bytes:
        return wire.pack_bundle({"A": self.A, "ek0": self.ek0, "ek1": self.ek1})


@dataclass(frozen=True)
class KeyMaterial:
    dims: ProtocolDims
    lanes: tuple[LaneKeys, ...]
    srfc: SrfcParams
    g0_norms: np.ndarray  # (m,)
    slot_of: tuple[tuple[int, int], ...]  # client -> (group, position)
    round_id: int = 0
    seed: object = field(default=None, compare=False)

    @property
    def plan(self) -> SegmentPlan:
        return plan_segmentation(self.dims)

    def group_of(self, i: int) -> ClientGroup:
        return self.lanes[0].groups[self.slot_of[i][0]]

    def client_keys(self, i: int) -> ClientKeys:
        gi, p = self.slot_of[i]
        ek0, ek1 = [], []
        for lane in self.lanes:
            grp = lane.groups[gi]
            ek0.append(grp.data(p))
            ek1.append(lane.mask_row(i) @ grp.mask(p) + lane.mu[i] @ grp.noise(p))
        return ClientKeys(owner=i, A=np.stack([lane.A.blocks for lane in self.lanes]), ek0=np.stack(ek0),
                          ek1=np.stack(ek1))

    def vk_second(self, i: int) -> np.ndarray:
        """Per-lane expected value of ``vk_first . delta``: ``V_i . sum_j R''_ij``."""
        gi, p = self.slot_of[i]
        return np.array([lane.groups[gi].verifier[p] @ lane.r2[i].sum(axis=0) for lane in self.lanes])

    def vk_first(self, i: int) -> np.ndarray:
        gi = self.slot_of[i][0]
        return np.stack([lane.groups[gi].vk_first for lane in self.lanes])

    def mask_content(self, i: int) -> np.ndarray:
        """Per-lane mask rows ``sum_j R''_ij A_j + mu_i`` hidden in client ``i``'s K and U channels."""
        return np.stack([lane.mask_row(i) + lane.mu[i] for lane in self.lanes])

    # -- aggregation keys --

    def decode_key(self, k: int = 0) -> np.ndarray:
        """``sum_i M_i^T D_i + M_{i+n}^T sum_j (K_j + U_j)`` for lane ``k`` (single client family only)."""
        lane = self.lanes[k]
        if len(lane.groups) != 1:
            raise ValueError("the direct decode key needs a single client family; use the layered plan")
        grp = lane.groups[0]
        n = self.dims.n
        blocks = self.srfc.family.blocks
        fam = grp.family.blocks
        data = np.einsum("kra,krb->ab", blocks[:n], fam[:n], optimize=True)
        masks = blocks[n:].sum(axis=0).T @ (fam[n:2 * n].sum(axis=0) + fam[2 * n:].sum(axis=0))
        return data + masks

    def alpha_factors(self, k: int, gi: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectors ``u_p = D_p^T h`` and ``v_p = U_p^T pinv(mu) / s`` for every slot of group ``gi`` in lane ``k``.

        Pairing ``delta`` with ``u_p`` gives the lane share of the cosine, pairing
        with ``v_p`` the lane share of the unit SRFC mask coefficient.  The dense
        per-column keys are ``u_p (x) P_p + v_p (x) Q_p`` (see :func:`alpha_prime_dense`).
        """
        lane = self.lanes[k]
        grp = lane.groups[gi]
        s = self.dims.s
        us, vs = [], []
        for p, i in enumerate(grp.slots):
            us.append(grp.data(p).T @ lane.h)
            if i < 0:
                vs.append(np.zeros(grp.family.c))
            else:
                vs.append(grp.noise(p).T @ mask_pinv(lane.mu[i][None, :])[:, 0] / s)
        return np.stack(us), np.stack(vs)

    @functools.cached_property
    def srfc_forms(self) -> tuple[np.ndarray, np.ndarray]:
        """``P_i = M_i^T R'_i M_i`` and ``Q_i = M_{i+n}^T R'_i M_{i+n}`` stacked (n, c, c)."""
        p = np.stack([self.srfc.data_form(i) for i in range(self.dims.n)])
        q = np.stack([self.srfc.mask_form(i) for i in range(self.dims.n)])
        return p, q

    @functools.cached_property
    def factor_table(self) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
        return {(k, g): self.alpha_factors(k, g)
                for k in range(len(self.lanes)) for g in range(len(self.lanes[k].groups))}

    @functools.cached_property
    def decode_keys(self) -> tuple[np.ndarray, ...]:
        return tuple(self.decode_key(k) for k in range(len(self.lanes)))

    def null_delta(self, i: int) -> np.ndarray:
        """KDC-issued zero-gradient ciphertext (mask channels only) for client ``i``."""
        return self.client_keys(i).ek1

    def null_alpha(self, i: int) -> np.ndarray:
        """KDC-issued zero-weight SRFC encoding standing in for a rejected client."""
        return self.srfc.mask_form(i)


def _client_groups(dims: ProtocolDims, lane_seed, a_blocks: np.ndarray) -> tuple[ClientGroup, ...]:
    size = dims.group_size
    count = math.ceil(dims.n / size) if dims.layers is None else dims.slots // size
    rows = dims.rows
    a_sum = a_blocks.sum(axis=0)  # (t, rows)
    groups = []
    for g, seed in enumerate(child_seeds(lane_seed, count)):
        s_fam, s_ver = child_seeds(seed, 2)
        fam = gen_family(3 * size, rows, 3 * rows * size, s_fam)
        slots = tuple(g * size + p if g * size + p < dims.n else -1 for p in range(size))
        verifier = as_rng(s_ver).standard_normal((size, dims.t))
        vk_first = np.einsum("pt,tr,prc->c", verifier, a_sum, fam.blocks[size:2 * size], optimize=True)
        groups.append(ClientGroup(family=fam, slots=slots, verifier=verifier, vk_first=vk_first))
    return tuple(groups)


def _round_masks(dims: ProtocolDims, seed) -> tuple[np.ndarray, np.ndarray]:
    """R'' (s, n, m, t) with unit per-client budget and zero sum per cluster; mu (s, n, t*m)."""
    s_r2, s_mu = child_seeds(seed, 2)
    r2 = gen_unit_zero_sum(dims.n, dims.s * dims.m * dims.t, s_r2).members
    r2 = r2.reshape(dims.n, dims.s, dims.m, dims.t).transpose(1, 0, 2, 3)
    mu = np.stack([gen_unit_zero_sum(dims.n, dims.rows, ms).members for ms in child_seeds(s_mu, dims.s)])
    return np.ascontiguousarray(r2), mu / math.sqrt(dims.s)


def init_keys(dims: ProtocolDims, g0, seed: SeedLike = None) -> KeyMaterial:
    """All protocol keys for ``dims`` around the server updates ``g0`` (m x l)."""
    g0 = np.asarray(g0, dtype=np.float64)
    if g0.shape != (dims.m, dims.l):
        raise ValueError(f"server updates must have shape {(dims.m, dims.l)}, got {g0.shape}")
    norms = np.linalg.norm(g0, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise ValueError("every server update must be finite and non-zero")
    plan = plan_segmentation(dims)
    s_lanes, s_srfc, s_masks = child_seeds(seed, 3)
    refs = plan.split(np.stack([reference_vector(g, dims) for g in g0]))  # (m, s, t)
    r2, mu = _round_masks(dims, s_masks)
    lanes = []
    for k, lane_seed in enumerate(child_seeds(s_lanes, dims.s)):
        s_a, s_groups = child_seeds(lane_seed, 2)
        a_fam = gen_family(dims.m, dims.t, dims.rows, s_a)
        lanes.append(LaneKeys(A=a_fam, groups=_client_groups(dims, s_groups, a_fam.blocks),
                              reference=refs[:, k, :], r2=r2[k], mu=mu[k]))
    srfc = gen_params(dims.n, dims.rows, SRFC_BOUND, s_srfc)
    size = dims.group_size
    slot_of = tuple((i // size, i % size) for i in range(dims.n))
    return KeyMaterial(dims=dims, lanes=tuple(lanes), srfc=srfc, g0_norms=norms, slot_of=slot_of, seed=seed)


def refresh_round(km: KeyMaterial, seed: SeedLike = None) -> KeyMaterial:
    """Fresh ``R''`` for the next round; families, SRFC parameters and ``mu`` are kept."""
    r2, _ = _round_masks(km.dims, seed)
    lanes = tuple(replace(lane, r2=r2[k]) for k, lane in enumerate(km.lanes))
    return replace(km, lanes=lanes, round_id=km.round_id + 1)


def alpha_prime_dense(km: KeyMaterial, k: int = 0) -> np.ndarray:
    """Materialised per-column keys ``alpha'_j`` (c, c', c) of lane ``k`` for the single-family layout.

    Row ``j`` of a client's SRFC encoding is ``delta @ alpha'_j``.  Only meant for
    small dimensions; the protocol itself uses the factored form.
    """
    p_forms, q_forms = km.srfc_forms
    u, v = km.alpha_factors(k, 0)
    return np.einsum("pa,pjc->jac", u, p_forms) + np.einsum("pa,pjc->jac", v, q_forms)


# --- layered aggregation plans ------------------------------------------------------


def layered_key_size(width: int, m: int, xi: Sequence[int]) -> int:
    """Closed-form float count of the transformation keys plus the final selector."""
    xi = list(xi)
    x = len(xi)
    total = 2 * width * m * xi[-1]
    for i in range(x - 1):
        total += 4 * width**2 * m**2 * xi[i] * xi[i + 1] * math.prod(xi[i + 1:])
    return total


@dataclass(frozen=True)
class EntryKeys:
    """Maps a first-stage client family into its first-level aggregation family."""

    weight_maps: np.ndarray  # (slots, c_srfc, c_group): M_{i(p)}^T D_p, zero for absent slots
    targets: np.ndarray  # (slots, rows, width_1): data blocks of the level-1 family
    mask_map: np.ndarray  # (c_group, width_1): sum_p (K_p + U_p)^T S[p + size]


@dataclass(frozen=True)
class LaneLayers:
    entry: tuple[EntryKeys, ...]  # per first-stage group
    transitions: tuple[tuple[np.ndarray, ...], ...]  # level i -> i+1, one key per level-i group
    selector: np.ndarray  # (2*rows*xi_x,) 1 on data columns of the final family


@dataclass(frozen=True)
class LayerPlan:
    xi: tuple[int, ...]
    lanes: tuple[LaneLayers, ...]
    rows: int
    width: int
    m: int

    @property
    def key_size(self) -> int:
        """Closed-form size per lane."""
        return layered_key_size(self.width, self.m, self.xi)

    def key_bytes(self, k: int = 0) -> bytes:
        lane = self.lanes[k]
        items = {f"tk.{i}.{g}": tk for i, level in enumerate(lane.transitions) for g, tk in enumerate(level)}
        items["selector"] = lane.selector
        return wire.pack_bundle(items)

    def serialized_key_floats(self) -> int:
        return sum(wire.float_count(self.key_bytes(k)) for k in range(len(self.lanes)))


def _level_families(xi: Sequence[int], rows: int, seed) -> list[list[MomaFamily]]:
    """Families per level and group; the last level is axis aligned (its decode key is a selector)."""
    x = len(xi)
    out = []
    seeds = child_seeds(seed, x)
    for i in range(x):
        count = math.prod(xi[i + 1:])
        k, c = 2 * xi[i], 2 * rows * xi[i]
        if i == x - 1:
            out.append([gen_family(k, rows, c, basis=np.eye(c))])
        else:
            out.append([gen_family(k, rows, c, gs) for gs in child_seeds(seeds[i], count)])
    return out


def _transition(src: MomaFamily, dst: MomaFamily, pos: int, contents: np.ndarray, rng) -> np.ndarray:
    """Summed SKT key of one group: every data block -> ``dst[pos]``, every mask block -> ``dst[pos + xi']``.

    ``contents`` holds the mask row currently sitting in each mask block; fresh
    masks are zero-sum over the members whose content is non-zero.
    """
    size = src.k // 2
    dsize = dst.k // 2
    live = [b for b in range(size) if np.linalg.norm(contents[b]) > LIVE_MASK_NORM]
    fresh = gen_zero_sum(max(len(live), 1), (1, dst.c), rng).members
    tk = np.zeros((src.c, dst.c))
    for b in range(size):
        tk += src[b].T @ dst[pos]
        tk += src[b + size].T @ dst[pos + dsize]
    for b, r_new in zip(live, fresh):
        tk += src[b + size].T @ (mask_pinv(contents[b][None, :]) @ r_new)
    return tk


def plan_layers(km: KeyMaterial, seed: SeedLike = None) -> LayerPlan:
    dims = km.dims
    if dims.layers is None:
        raise ValueError("key material was not generated for layered aggregation (dims.layers is None)")
    xi = dims.layers
    rows = dims.rows
    n = dims.n
    size = xi[0]
    lanes = []
    for k, lane_seed in enumerate(child_seeds(seed, dims.s)):
        s_fam, s_fresh = child_seeds(lane_seed, 2)
        rng = as_rng(s_fresh)
        lane = km.lanes[k]
        fams = _level_families(xi, rows, s_fam)
        entry = []
        for g, grp in enumerate(lane.groups):
            dst = fams[0][g]
            wmaps = np.zeros((size, km.srfc.c, grp.family.c))
            mask_map = np.zeros((grp.family.c, dst.c))
            for p, i in enumerate(grp.slots):
                if i >= 0:
                    wmaps[p] = km.srfc.family[i].T @ grp.data(p)
                mask_map += (grp.mask(p) + grp.noise(p)).T @ dst[p + size]
            entry.append(EntryKeys(weight_maps=wmaps, targets=dst.blocks[:size].copy(), mask_map=mask_map))
        # mask rows carried by every level-1 mask block
        contents = np.zeros((len(lane.groups), size, rows))
        for i in range(n):
            g, p = km.slot_of[i]
            contents[g, p] = lane.mask_row(i) + lane.mu[i]
        transitions = []
        for lvl in range(len(xi) - 1):
            nxt = xi[lvl + 1]
            keys = []
            new_contents = np.zeros((len(fams[lvl + 1]), nxt, rows))
            for g, src in enumerate(fams[lvl]):
                parent, pos = divmod(g, nxt)
                keys.append(_transition(src, fams[lvl + 1][parent], pos, contents[g], rng))
                new_contents[parent, pos] = contents[g].sum(axis=0)
            transitions.append(tuple(keys))
            contents = new_contents
        final = fams[-1][0]
        selector = np.zeros(final.c)
        selector[: rows * xi[-1]] = 1.0
        lanes.append(LaneLayers(entry=tuple(entry), transitions=tuple(transitions), selector=selector))
    return LayerPlan(xi=xi, lanes=tuple(lanes), rows=rows, width=dims.t, m=dims.m)


def keygen_selftest(dims: ProtocolDims, seed: SeedLike = 0) -> dict[str, float]:
    """Residuals of the key-material invariants (all should be ~0)."""
    rng = as_rng(seed)
    g0 = rng.standard_normal((dims.m, dims.l))
    km = init_keys(dims, g0, rng)
    res = {}
    r2 = np.stack([lane.r2 for lane in km.lanes])  # (s, n, m, t)
    res["r2_zero_sum"] = float(np.max(np.abs(r2.sum(axis=1))))
    res["r2_budget"] = float(np.max(np.abs((r2**2).sum(axis=(0, 2, 3)) - 1.0)))
    mu = np.stack([lane.mu for lane in km.lanes])
    res["mu_zero_sum"] = float(np.max(np.abs(mu.sum(axis=1))))
    res["mu_norm"] = float(np.max(np.abs((mu**2).sum(axis=(0, 2)) - 1.0)))
    res["family_gram"] = max(max(g.family.gram_error() for g in lane.groups) for lane in km.lanes)
    res["a_gram"] = max(lane.A.gram_error() for lane in km.lanes)
    res["srfc_gram"] = km.srfc.family.gram_error()
    return res
