"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import dataclasses
import math
import time

import numpy as np
import pytest

from ebscfl import kdc, moma, protocol, srfc, vomca
from ebscfl.simcli import bench, equivalence, runner
from ebscfl.simcli.config import AttackSpec, DataSpec, DimsSpec, RunConfig, TrainSpec

GRID = dict(ns=(2, 4, 8), ms=(1, 2, 3), ls=(4, 8, 16), seeds=range(20))


def announce(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="module")
def keystone():
    """One pass over the grid: secure vs plaintext updates, honest norms and skip-normalisation verdicts."""
    start = time.perf_counter()
    rows = []
    for n in GRID["ns"]:
        for m in GRID["ms"]:
            for l in GRID["ls"]:
                for seed in GRID["seeds"]:
                    rng, g0, grads, clusters = equivalence.random_instance(n, m, l, seed)
                    dims = kdc.ProtocolDims(n=n, m=m, l=l)
                    km = kdc.init_keys(dims, g0, rng)
                    encs = [protocol.client_encode(g, int(j), km.client_keys(i), dims)
                            for i, (g, j) in enumerate(zip(grads, clusters))]
                    out = protocol.robust_aggregate(encs, km)
                    err, _, match = equivalence.compare(out, equivalence.plain_outcome(dims, g0, grads, clusters))
                    skip = protocol.client_encode(grads[0], int(clusters[0]), km.client_keys(0), dims,
                                                  normalize=False)
                    rows.append(dict(
                        rel_error=err,
                        active_match=match,
                        accepted=all(v.accepted for v in out.verdicts.values()),
                        norm_gap=max(abs(e.norm_sq - 3.0) for e in encs),
                        skip_rejected=not protocol.server_verify(skip, km).accepted,
                    ))
    return rows, time.perf_counter() - start


def test_criterion_1_keystone_equivalence(keystone, capsys):
    rows, seconds = keystone
    worst = max(r["rel_error"] for r in rows)
    ok = (len(rows) == 540 and worst <= 1e-6 and all(r["active_match"] and r["accepted"] for r in rows)
          and seconds <= 300)
    announce(capsys, 1, ok, f"{len(rows)} cases, worst relative error {worst:.2e}, {seconds:.0f} s")
    assert ok


def test_criterion_2_relu_sum_oracle(capsys):
    worst_rel, worst_zero = 0.0, 0.0
    for n in range(1, 9):
        for seed in range(50):
            rng = np.random.default_rng([n, seed])
            r = int(rng.choice([2, 4, 8]))
            params = srfc.gen_params(n, r, kdc.SRFC_BOUND, rng)
            xs = rng.uniform(-1.0, 1.0, n)
            if seed % 5 == 0:
                xs = -np.abs(xs)
            encs = [srfc.encode_alpha(x, i, params) for i, x in enumerate(xs)]
            got = srfc.decode_relu_sum(srfc.aggregate_encoded_relu(encs, params), params)
            ref = float(np.maximum(xs, 0).sum())
            if ref == 0:
                worst_zero = max(worst_zero, abs(got))
            else:
                worst_rel = max(worst_rel, abs(got - ref) / ref)
    ladder = 0.0
    signs = srfc.frozen_signs()
    for seed in range(50):
        rng = np.random.default_rng([99, seed])
        n, r = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        params = srfc.gen_params(n, r, kdc.SRFC_BOUND, rng, signs=signs)
        xs = rng.uniform(0.05, 1.0, n) * rng.choice([-1.0, 1.0], n)
        ladder = max(ladder, max(srfc.ladder_residuals(xs, params).values()))
    ok = worst_rel <= 1e-6 and worst_zero <= 1e-8 and ladder <= 1e-8
    announce(capsys, 2, ok, f"relative {worst_rel:.1e}, at zero {worst_zero:.1e}, ladder {ladder:.1e}")
    assert ok


def test_criterion_3_vomca_soundness(capsys):
    honest, accepted, trials, false_accepts = 0, 0, 0, 0
    rng = np.random.default_rng(2024)
    while trials < 10_000:
        n, r = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        keys = vomca.keygen(n, r, 2 * n * r + int(rng.integers(0, 4)), seed=rng)
        cts = [vomca.encode(rng.uniform(-10, 10), i, keys) for i in range(n)]
        honest += n
        accepted += sum(vomca.verify(ct, keys) for ct in cts)
        for ct in cts:
            magnitude = 10 ** rng.uniform(-3, 3)
            if trials % 2:
                e = rng.standard_normal(ct.value.shape)
            else:  # confined to the owner's mask block
                e = rng.standard_normal((r, r)) @ keys.family[ct.owner + n]
            e *= magnitude / np.linalg.norm(e)
            false_accepts += vomca.verify(vomca.Ciphertext(ct.value + e, ct.owner), keys)
            trials += 1
    ok = accepted == honest and false_accepts == 0
    announce(capsys, 3, ok, f"{accepted}/{honest} honest accepted, {false_accepts}/{trials} tamperings accepted")
    assert ok


def test_criterion_4_norm_gate(keystone, capsys):
    rows, _ = keystone
    gap = max(r["norm_gap"] for r in rows)
    rejected = sum(r["skip_rejected"] for r in rows)
    ok = gap <= 1e-6 and rejected == len(rows)
    announce(capsys, 4, ok, f"max | |delta|^2 - 3 | = {gap:.1e}, skip-normalisation rejected {rejected}/{len(rows)}")
    assert ok


def test_criterion_5_compression_transparency(capsys):
    worst, size_mismatch, cases, misses = 0.0, 0, 0, []
    for n, plans in ((4, [(4,), (2, 2)]), (8, [(8,), (2, 2, 2)])):
        for m in (1, 2, 3):
            for l in (4, 8, 16):
                for seed in range(5):
                    _, g0, grads, clusters = equivalence.random_instance(n, m, l, seed)
                    base = equivalence.secure_outcome(kdc.ProtocolDims(n=n, m=m, l=l), g0, grads, clusters,
                                                      np.random.default_rng(seed))
                    variants = [kdc.ProtocolDims(n=n, m=m, l=l, s=s) for s in (1, 2, 4)]
                    variants += [kdc.ProtocolDims(n=n, m=m, l=l, layers=p) for p in plans]
                    for dims in variants:
                        rng = np.random.default_rng([seed, 7])
                        km = kdc.init_keys(dims, g0, rng)
                        encs = [protocol.client_encode(g, int(j), km.client_keys(i), dims)
                                for i, (g, j) in enumerate(zip(grads, clusters))]
                        if dims.layers:
                            plan = kdc.plan_layers(km, rng)
                            out = protocol.run_layered(encs, plan, km)
                            size_mismatch += plan.serialized_key_floats() != kdc.layered_key_size(
                                dims.t, m, dims.layers)
                        else:
                            out = protocol.robust_aggregate(encs, km)
                        assert np.array_equal(out.active, base.active)
                        for j in np.flatnonzero(base.active):
                            ref = np.linalg.norm(base.updates[j])
                            gap = np.linalg.norm(out.updates[j] - base.updates[j]) / ref
                            worst = max(worst, gap)
                            if gap > 1e-6:
                                misses.append(base.cluster_weights[j])
                        cases += 1
    formula = kdc.layered_key_size(4, 2, [8]) == 128 and kdc.layered_key_size(2, 1, [2, 2]) == 136
    ok = worst <= 1e-6 and size_mismatch == 0 and formula
    lightest = f", lightest offending cluster weight {min(misses):.1e}" if misses else ""
    announce(capsys, 5, ok, f"{cases} variants, worst relative gap {worst:.1e}, {len(misses)} cluster updates "
                            f"over 1e-6{lightest}, key-size mismatches {size_mismatch}")
    assert ok


def test_criterion_6_scaling_trends(capsys):
    report = bench.bench("small")
    checks = bench.trends_hold(report)
    slopes = ", ".join(f"{k} {v:.2f}" for k, v in sorted(report.slopes.items()))
    ok = all(checks.values())
    announce(capsys, 6, ok, f"{checks}; slopes: {slopes}")
    assert ok


FIXTURE_SEEDS = range(10)


def sign_flip_config(seed):
    return RunConfig(dims=DimsSpec(n=10, m=2, l=8),
                     train=TrainSpec(rounds=40, local_steps=2, lr=0.05, eta=0.1, eta_decay=0.93),
                     data=DataSpec(alpha=0.0, init_radius=0.5),
                     attack=AttackSpec(kind="sign-flip", fraction=0.4), seed=seed)


def test_criterion_7_robustness(capsys):
    ebs, fed, zero_weight = [], [], []
    for seed in FIXTURE_SEEDS:
        cfg = sign_flip_config(seed)
        attacked, clean = runner.twin_runs(cfg, "secure")
        ebs.append(attacked.final_error / clean.final_error)
        attacked, clean = runner.twin_runs(cfg, "fedavg")
        fed.append(attacked.final_error / clean.final_error)
        flip = dataclasses.replace(cfg, data=DataSpec(kind="logistic", alpha=0.0, noise=0.0, init_radius=0.5),
                                   attack=AttackSpec(kind="label-flip", fraction=0.4))
        res = runner.simulate(flip, "plain")
        weights = res.history.series("weights")[:, list(flip.adversaries)]
        zero_weight.append(float(np.mean(np.all(weights == 0, axis=1))))
    ok = max(ebs) <= 1.2 and min(fed) >= 2.0 and min(zero_weight) >= 0.9
    announce(capsys, 7, ok, f"secure error ratio <= {max(ebs):.3f}, FedAvg ratio >= {min(fed):.2f}, "
                            f"label-flip zero-weight rounds >= {min(zero_weight):.0%}")
    assert ok


def test_criterion_8_contraction(capsys):
    fractions = []
    for seed in range(20):
        cfg = dataclasses.replace(sign_flip_config(seed), attack=AttackSpec())
        res = runner.simulate(cfg, "plain")
        err = np.vstack([np.linalg.norm(res.initial.models - res.data.truth, axis=1),
                         res.history.series("param_error")])
        fractions.append(float(np.mean(err[1:] < err[:-1])))
    ok = min(fractions) >= 0.9
    announce(capsys, 8, ok, f"contracting (round, cluster) pairs: min {min(fractions):.0%}, "
                            f"mean {np.mean(fractions):.1%} over 20 seeds")
    assert ok
