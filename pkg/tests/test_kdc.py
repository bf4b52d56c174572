import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebscfl import kdc, protocol, srfc, wire


def material(n=4, m=2, l=6, seed=0, **kw):
    dims = kdc.ProtocolDims(n=n, m=m, l=l, **kw)
    rng = np.random.default_rng(seed)
    g0 = rng.standard_normal((m, l))
    return dims, g0, kdc.init_keys(dims, g0, rng)


@pytest.mark.parametrize("kw", [
    dict(n=1, m=1, l=4),
    dict(n=3, m=0, l=4),
    dict(n=3, m=1, l=4, weighting="other"),
    dict(n=3, m=1, l=4, s=2, t=2),
    dict(n=5, m=1, l=4, layers=(2, 2)),
    dict(n=4, m=1, l=4, layers=(2, 0)),
])
def test_dims_validation(kw):
    with pytest.raises(ValueError):
        kdc.ProtocolDims(**kw)


def test_dims_derived_sizes():
    dims = kdc.ProtocolDims(n=6, m=2, l=8, s=3)
    assert dims.width == 9 and dims.t == 3 and dims.rows == 6
    dims = kdc.ProtocolDims(n=6, m=2, l=8, weighting="global", layers=[2, 4])
    assert dims.width == 8 and dims.layers == (2, 4) and dims.group_size == 2 and dims.slots == 8


@pytest.mark.parametrize("kw", [dict(), dict(s=2), dict(s=3, layers=(2, 2))])
def test_keygen_selftest_residuals(kw):
    res = kdc.keygen_selftest(kdc.ProtocolDims(n=4, m=3, l=7, **kw), seed=1)
    assert set(res) >= {"r2_zero_sum", "r2_budget", "mu_zero_sum", "mu_norm", "family_gram"}
    assert max(res.values()) <= 1e-12


def test_encode_key_masks_cancel_against_channel_sums():
    # the individual mask keys do not sum to zero; contracted with the summed
    # mask channels they reduce to the zero-sum mask rows
    dims, g0, km = material(n=4, m=2, l=5, seed=3)
    grp = km.lanes[0].groups[0]
    n = dims.n
    channels = sum(grp.mask(p) + grp.noise(p) for p in range(n))
    ek1 = np.stack([km.client_keys(i).ek1[0] for i in range(n)])
    assert np.max(np.abs(ek1.sum(axis=0))) > 1e-3
    contracted = ek1 @ channels.T
    assert np.allclose(contracted, np.stack([km.mask_content(i)[0] for i in range(n)]), atol=1e-12)
    assert np.max(np.abs(contracted.sum(axis=0))) <= 1e-12


@pytest.mark.parametrize("s", [1, 2, 3])
def test_honest_delta_norm(s):
    dims, g0, km = material(n=3, m=2, l=8, seed=s, s=s)
    rng = np.random.default_rng(10)
    for i in range(3):
        enc = protocol.client_encode(rng.standard_normal(8) * 50, i % 2, km.client_keys(i), dims)
        assert abs(enc.norm_sq - 3.0) <= 1e-9


def test_refresh_changes_cluster_masks_only():
    dims, g0, km = material(seed=4)
    new = kdc.refresh_round(km, seed=5)
    assert new.round_id == km.round_id + 1
    assert not np.allclose(new.lanes[0].r2, km.lanes[0].r2)
    assert np.array_equal(new.lanes[0].mu, km.lanes[0].mu)
    assert new.srfc is km.srfc
    assert np.allclose(new.lanes[0].r2.sum(axis=0), 0, atol=1e-12)
    g = np.ones(dims.l)
    before = protocol.client_encode(g, 0, km.client_keys(0), dims)
    after = protocol.client_encode(g, 0, new.client_keys(0), dims)
    assert not np.allclose(before.delta, after.delta)


def test_refresh_preserves_equivalence():
    dims, g0, km = material(n=4, m=2, l=6, seed=6)
    km = kdc.refresh_round(kdc.refresh_round(km, 1), 2)
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((4, 6))
    out = protocol.run_segmented(grads, [0, 1, 0, 1], km)
    ref = g0.copy()
    for j in range(2):
        cos = np.array([g @ ref[j] / np.linalg.norm(g) / np.linalg.norm(ref[j]) for g in grads[j::2]])
        w = np.maximum(cos, 0)
        if w.sum() > 1e-6:
            unit = grads[j::2] / np.linalg.norm(grads[j::2], axis=1, keepdims=True)
            expected = np.linalg.norm(ref[j]) * (w @ unit) / w.sum()
            assert np.allclose(out.updates[j], expected, rtol=1e-7, atol=1e-9)


def test_single_segment_matches_default_layout():
    a = kdc.ProtocolDims(n=3, m=2, l=5)
    b = kdc.ProtocolDims(n=3, m=2, l=5, s=1, t=6)
    assert a == b
    plan = kdc.plan_segmentation(a)
    assert plan.mu_norm == 1.0 and plan.padded == 6


def test_segment_split_pads_and_joins():
    plan = kdc.SegmentPlan(s=3, t=4, width=10)
    v = np.arange(10.0)
    parts = plan.split(v)
    assert parts.shape == (3, 4)
    assert np.array_equal(parts[-1, 2:], [0.0, 0.0])
    assert np.array_equal(plan.join(parts), v)
    with pytest.raises(ValueError):
        plan.split(np.ones(13))


@given(seed=st.integers(0, 10**6), s=st.integers(1, 5), width=st.integers(2, 30))
def test_segment_inner_products_recombine(seed, s, width):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, width))
    t = math.ceil(width / s)
    parts = kdc.segment_inner_products(a, b, kdc.SegmentPlan(s=s, t=t, width=width))
    assert parts.shape == (s,)
    assert abs(parts.sum() - a @ b) <= 1e-12 * max(1.0, np.abs(a) @ np.abs(b))


@pytest.mark.parametrize("s", [1, 2, 4])
def test_segment_norm_budgets(s):
    dims, g0, km = material(n=5, m=2, l=9, s=s)
    r2 = np.stack([lane.r2 for lane in km.lanes])
    mu = np.stack([lane.mu for lane in km.lanes])
    assert np.allclose((r2**2).sum(axis=(0, 2, 3)), 1.0)
    assert np.allclose((mu**2).sum(axis=2), 1.0 / s)


def test_client_vector_and_reference_give_cosine():
    dims = kdc.ProtocolDims(n=2, m=1, l=4)
    g, g0 = np.array([1.0, 2.0, 0.0, -1.0]), np.array([0.5, 0.0, 1.0, 1.0])
    v = kdc.client_vector(g, dims)
    assert abs(v @ v - 1) <= 1e-15
    cos = g @ g0 / np.linalg.norm(g) / np.linalg.norm(g0)
    assert abs(v @ kdc.reference_vector(g0, dims) - cos) <= 1e-15
    gdims = kdc.ProtocolDims(n=2, m=1, l=4, weighting="global")
    assert abs(kdc.client_vector(g, gdims) @ kdc.reference_vector(g0, gdims) - cos) <= 1e-15


@pytest.mark.parametrize("g", [np.zeros(4), np.array([np.inf, 0, 0, 0]), np.ones(3)])
def test_client_vector_rejects(g):
    with pytest.raises(ValueError):
        kdc.client_vector(g, kdc.ProtocolDims(n=2, m=1, l=4))


def test_init_keys_rejects_bad_server_updates():
    dims = kdc.ProtocolDims(n=2, m=2, l=3)
    with pytest.raises(ValueError):
        kdc.init_keys(dims, np.ones((1, 3)))
    with pytest.raises(ValueError):
        kdc.init_keys(dims, np.array([[1.0, 0, 0], [0, 0, 0]]))


def test_dense_alpha_keys_match_factored_assembly():
    dims, g0, km = material(n=3, m=2, l=3, seed=7)
    dense = kdc.alpha_prime_dense(km)
    rng = np.random.default_rng(1)
    for i in range(3):
        enc = protocol.client_encode(rng.standard_normal(3), i % 2, km.client_keys(i), dims)
        via_dense = np.einsum("a,jac->jc", enc.delta[0], dense)
        assert np.allclose(via_dense, protocol.assemble_alpha(enc, km).alpha, atol=1e-10)


def test_assembled_alpha_encodes_the_cosine():
    dims, g0, km = material(n=3, m=2, l=5, seed=8, s=2)
    g = np.random.default_rng(2).standard_normal(5)
    cos = g @ g0[1] / np.linalg.norm(g) / np.linalg.norm(g0[1])
    enc = protocol.client_encode(g, 1, km.client_keys(2), dims)
    expected = srfc.encode_alpha(cos, 2, km.srfc).alpha
    assert np.allclose(protocol.assemble_alpha(enc, km).alpha, expected, atol=1e-8)


def test_client_key_bundle_round_trip():
    dims, g0, km = material(n=3, m=2, l=5, s=2)
    ck = km.client_keys(1)
    items = wire.unpack_bundle(ck.to_bytes())
    assert np.array_equal(items["ek0"], ck.ek0) and np.array_equal(items["A"], ck.A)
    assert ck.A.shape == (2, 2, 3, 6)


def test_direct_decode_key_needs_single_family():
    dims, g0, km = material(n=4, m=1, l=3, layers=(2, 2))
    with pytest.raises(ValueError):
        km.decode_key()


def test_key_size_formula_examples():
    assert kdc.layered_key_size(4, 2, [8]) == 128
    assert kdc.layered_key_size(2, 1, [2, 2]) == 136


@pytest.mark.parametrize("layers", [(4,), (2, 2), (2, 2, 2), (3, 2)])
@pytest.mark.parametrize("s", [1, 2])
def test_serialized_keys_match_formula(layers, s):
    n = min(4, math.prod(layers))
    dims, g0, km = material(n=n, m=2, l=5, s=s, layers=layers)
    plan = kdc.plan_layers(km, seed=3)
    assert plan.key_size == kdc.layered_key_size(dims.t, 2, layers)
    assert plan.serialized_key_floats() == s * plan.key_size


def test_plan_layers_requires_layered_dims():
    dims, g0, km = material()
    with pytest.raises(ValueError):
        kdc.plan_layers(km)


def test_null_ciphertext_passes_mask_check_only():
    dims, g0, km = material(n=3, m=1, l=4)
    enc = protocol.EncodedGradient(delta=km.null_delta(0), owner=0)
    assert protocol.server_verify(enc, km).reason == "norm-check"
