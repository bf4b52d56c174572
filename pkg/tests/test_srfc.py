import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebscfl import moma, srfc

BOUND = 1.01


def relu_sum(xs, params):
    encs = [srfc.encode_alpha(x, i, params) for i, x in enumerate(xs)]
    return srfc.decode_relu_sum(srfc.aggregate_encoded_relu(encs, params), params)


def test_single_participant_has_no_mask_randomness():
    p = srfc.gen_params(1, 2, BOUND, seed=0)
    assert np.array_equal(p.zeta[0], np.zeros((2, 2)))
    assert np.allclose(p.r0[0] + p.r1[0], 0.0)
    assert abs(relu_sum([0.7], p) - 0.7) <= 1e-8
    assert abs(relu_sum([-0.7], p)) <= 1e-8


def test_sparse_randoms_follow_block_signs():
    p = srfc.gen_params(3, 2, BOUND, seed=1)
    data = p.family.blocks[:3]
    assert np.all(p.r1[data > 0] == 0)
    assert np.all(p.r2[data <= 0] == 0)
    mag = np.abs(data[data <= 0])
    r1 = p.r1[data <= 0]
    assert np.all(r1 > BOUND * mag) and np.all(r1 < BOUND)
    r2 = p.r2[data > 0]
    assert np.all(r2 > 0) and np.all(r2 < 2 * BOUND**2)


def test_tau1_contracts_each_form_to_its_block():
    p = srfc.gen_params(3, 2, BOUND, seed=2)
    for i in range(3):
        m_i = p.family[i]
        got = p.beta @ (m_i.T @ p.rprime[i] @ m_i) @ p.tau1
        assert np.allclose(got, m_i, atol=1e-10)


def test_zero_secret_encodes_to_mask_form():
    p = srfc.gen_params(2, 2, BOUND, seed=3)
    assert np.array_equal(srfc.encode_alpha(0.0, 1, p).alpha, p.mask_form(1))


def test_alpha_square_keeps_block_structure():
    p = srfc.gen_params(2, 2, BOUND, seed=4)
    x = 0.6
    a = srfc.encode_alpha(x, 0, p).alpha
    m, mm, rp = p.family[0], p.family[2], p.rprime[0]
    expected = x * x * m.T @ rp @ rp @ m + mm.T @ rp @ rp @ mm
    assert np.allclose(a @ a, expected, atol=1e-12)


def test_relu_sum_examples():
    p = srfc.gen_params(2, 2, 3.5, seed=5)
    assert abs(relu_sum([3.0, -2.0], p) - 3.0) <= 1e-8
    p = srfc.gen_params(3, 2, BOUND, seed=6)
    assert abs(relu_sum([-0.3, -0.9, -0.01], p)) <= 1e-8
    assert abs(relu_sum([0.5, 0.25, 1.0], p) - 1.75) <= 1e-8


def test_decode_examples():
    p = srfc.gen_params(2, 3, BOUND, seed=7)
    assert abs(srfc.decode_relu_sum(np.asarray(p.family[1]), p) - 1.0) <= 1e-12
    assert srfc.decode_relu_sum(np.zeros_like(p.beta), p) == 0.0
    with pytest.raises(ValueError):
        srfc.decode_relu_sum(np.zeros((2, 2)), p)


def test_masks_cancel_in_the_aggregate():
    p = srfc.gen_params(3, 2, BOUND, seed=8)
    xs = [0.4, -0.2, 0.9]
    encs = [srfc.encode_alpha(x, i, p) for i, x in enumerate(xs)]
    agg = srfc.aggregate_encoded_relu(encs, p)
    blocks = p.family.blocks
    # the mask-block content of the aggregate is half the zero-sum zeta
    mask_part = sum(agg @ blocks[i + 3].T for i in range(3))
    assert np.allclose(mask_part, 0.5 * p.zeta.sum(axis=0), atol=1e-8)
    for i, x in enumerate(xs):
        assert np.allclose(agg @ blocks[i].T, max(x, 0) * np.eye(2), atol=1e-8)


def test_calibrated_signs_are_stable():
    assert srfc.frozen_signs().as_tuple() == (1, 1, 1, -1)
    report = srfc.calibrate_signs()
    assert report.chosen.as_tuple() == (1, 1, 1, -1)
    assert len(report.residuals) == 16
    assert max(report.residuals[(1, 1, 1, -1)].values()) <= 1e-8
    assert max(report.residuals[(-1, -1, -1, 1)].values()) > 1e-3


def test_calibration_probe_limits():
    with pytest.raises(ValueError):
        srfc.calibrate_signs(n=4)
    with pytest.raises(ValueError):
        srfc.calibrate_signs(r=5)


def test_ladder_on_mixed_signs():
    p = srfc.gen_params(3, 3, BOUND, seed=9)
    res = srfc.ladder_residuals([0.8, -0.5, 1.0], p)
    assert set(res) == {"linear", "cubic", "branch", "assembly"}
    assert max(res.values()) <= 1e-8


def test_ladder_at_zero_secret_loses_precision_but_stays_small():
    # square roots of near-zero entries amplify rounding when x is exactly 0
    p = srfc.gen_params(4, 3, BOUND, seed=9)
    res = srfc.ladder_residuals([0.8, -0.5, 0.0, 1.0], p)
    assert res["linear"] <= 1e-12
    assert max(res.values()) <= 1e-6


def test_negative_probe_branch_closed_form():
    # data blocks with only non-positive entries: every entry sits on the R1 branch
    c = 4
    fam = moma.gen_family(2, 1, c, basis=-np.eye(c))
    p = srfc.gen_params(1, 1, BOUND, seed=10, c=c, family=fam)
    assert np.all(p.r2 == 0)
    for x in (0.3, -0.8):
        br = srfc.relu_branch(srfc.encode_alpha(x, 0, p).alpha, p)
        assert np.allclose(br, abs(x) * p.family[0] + p.r1[0], atol=1e-8)


def test_positive_probe_branch_on_positive_support():
    c = 4
    fam = moma.gen_family(2, 1, c, basis=np.eye(c))
    p = srfc.gen_params(1, 1, BOUND, seed=11, c=c, family=fam)
    positive = p.family[0] > 0
    br = srfc.relu_branch(srfc.encode_alpha(0.6, 0, p).alpha, p)
    assert np.allclose(br[positive], 0.6 * p.family[0][positive], atol=1e-8)


def test_encode_rejects_out_of_bound_and_index():
    p = srfc.gen_params(2, 2, BOUND, seed=12)
    with pytest.raises(ValueError):
        srfc.encode_alpha(1.01, 0, p)
    with pytest.raises(ValueError):
        srfc.encode_alpha(float("nan"), 0, p)
    with pytest.raises(IndexError):
        srfc.encode_alpha(0.1, 2, p)


def test_aggregate_needs_every_participant():
    p = srfc.gen_params(3, 2, BOUND, seed=13)
    encs = [srfc.encode_alpha(0.1, i, p) for i in range(2)]
    with pytest.raises(ValueError):
        srfc.aggregate_encoded_relu(encs, p)


def test_param_validation():
    with pytest.raises(ValueError):
        srfc.gen_params(2, 2, 0.0)
    with pytest.raises(ValueError):
        srfc.gen_params(0, 2, 1.0)
    with pytest.raises(ValueError):
        srfc.gen_params(2, 2, 1.0, family=moma.gen_family(3, 2, 12, seed=0))


def test_forms_are_consistent_with_encoding():
    p = srfc.gen_params(2, 2, BOUND, seed=14)
    a = srfc.encode_alpha(0.3, 1, p).alpha
    assert np.allclose(a, 0.3 * p.data_form(1) + p.mask_form(1))


@given(n=st.sampled_from([1, 2, 4, 8]), r=st.sampled_from([2, 4, 8]), seed=st.integers(0, 10**6),
       data=st.data())
def test_relu_sum_property(n, r, seed, data):
    xs = data.draw(st.lists(st.floats(-1.0, 1.0), min_size=n, max_size=n))
    p = srfc.gen_params(n, r, BOUND, seed=seed)
    ref = sum(max(x, 0.0) for x in xs)
    got = relu_sum(xs, p)
    assert abs(got - ref) <= 1e-8 * max(1.0, ref) + 1e-7
