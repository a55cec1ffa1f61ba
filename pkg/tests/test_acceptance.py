"""Acceptance gate: twelve criteria, one pass/fail line each.

Each test prints ``criterion N PASS/FAIL: <description>`` so the gate can
be read off the pytest -s output at a glance.  Tolerances are pinned; the
randomized harnesses are frozen (fixed seeds and sizes) so every run is
deterministic.
"""

import numpy as np
import pytest
import torch
from dataclasses import replace
from scipy.stats import multivariate_normal

from fairsv import (SynthConfig, TrialList, DcapldaBackend, DpldaBackend,
                    PldaBackend, bayes_threshold, bootstrap_ci, build_trials,
                    build_group_assignment, evaluate, fdr, generate,
                    inject_skew, min_cllr_affine, oracle_llr_set, plda_llr,
                    weighted_cllr)
from fairsv.data import EmbeddingSet
from fairsv.discriminative import (ConditionCalibrator, dplda_score,
                                   gradient_check, init_from_generative)
from fairsv.generative import sample_calibration_trials


def _report(n, desc, ok):
    print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {desc}")
    assert ok, f"criterion {n} failed: {desc}"


# --------------------------------------------------------------------------
# 1-4: instant anchors


def test_criterion_1_threshold_anchor():
    got = bayes_threshold(0.05)
    _report(1, f"bayes_threshold(0.05) = {got:.4f} (want 2.9444 +/- 1e-3)",
            abs(got - 2.9444) < 1e-3)


def test_criterion_2_entropy_anchor():
    got = weighted_cllr(np.zeros(1000), np.arange(1000) < 500, pi=0.05)
    _report(2, f"weighted_cllr(all-zero, pi=0.05) = {got:.5f} bits "
            "(want 0.28640 +/- 1e-4)", abs(got - 0.28640) < 1e-4)


def test_criterion_3_fdr_anchor():
    # USA (p_fa 0.0091, p_miss 0.0569), India (0.0863, 0.0558), alpha 0.95
    got = fdr([(0.0091, 0.0569), (0.0863, 0.0558)], alpha=0.95)
    _report(3, f"FDR anchor = {got:.4f} (want 0.9266 +/- 1e-4)",
            abs(got - 0.9266) < 1e-4)


def _brute_force_llr_1d(x1, x2):
    # joint Gaussian densities with B = W = 1 (scalar case)
    same = multivariate_normal(mean=[0, 0], cov=[[2, 1], [1, 2]])
    diff = multivariate_normal(mean=[0, 0], cov=[[2, 0], [0, 2]])
    return same.logpdf([x1, x2]) - diff.logpdf([x1, x2])


def test_criterion_4_scoring_oracle():
    B = np.eye(1)
    W = np.eye(1)
    x = np.array([1.0])
    got = float(plda_llr(B, W, x, x))
    oracle = _brute_force_llr_1d(1.0, 1.0)
    swap_exact = got == float(plda_llr(B, W, x.copy(), x.copy()))
    ok = (abs(got - oracle) < 1e-6 and abs(got - 0.31049) < 1e-4
          and swap_exact)
    _report(4, f"1-D PLDA LLR at x1=x2=1 is {got:.6f} nats "
            f"(brute force {oracle:.6f}, quoted 0.31049); symmetric", ok)


# --------------------------------------------------------------------------
# 5: calibration of oracle LLRs on matched data


def test_criterion_5_oracle_calibration():
    d = 8
    n = 20000
    rng = np.random.default_rng(42)
    B = np.eye(d)
    W = np.eye(d)
    u = rng.standard_normal((n, d))
    tar1 = u + rng.standard_normal((n, d))
    tar2 = u + rng.standard_normal((n, d))
    non1 = rng.standard_normal((n, d)) + rng.standard_normal((n, d))
    non2 = rng.standard_normal((n, d)) + rng.standard_normal((n, d))
    llrs = np.concatenate([plda_llr(B, W, tar1, tar2),
                           plda_llr(B, W, non1, non2)])
    labels = np.arange(2 * n) < n
    cal_loss = weighted_cllr(llrs, labels) - min_cllr_affine(llrs, labels)
    _report(5, f"oracle LLR calibration loss = {cal_loss:.5f} bits on "
            f"{n} trials/class (want < 0.01)", cal_loss < 0.01)


# --------------------------------------------------------------------------
# 6: min-Cllr properties


def _grid_min_cllr(llrs, labels, pi=0.05):
    a = np.concatenate([np.geomspace(1e-3, 30.0, 400),
                        -np.geomspace(1e-3, 30.0, 400)])
    b = np.linspace(-12.0, 12.0, 401)
    tau = np.log(pi / (1 - pi))
    s = np.asarray(llrs)
    best = np.inf
    for av in a:
        z = av * s[None, :] + b[:, None] + tau
        tar = np.logaddexp(0.0, -z[:, labels]).mean(axis=1)
        non = np.logaddexp(0.0, z[:, ~labels]).mean(axis=1)
        val = (pi * tar + (1 - pi) * non).min() / np.log(2)
        best = min(best, val)
    return best


def test_criterion_6_min_cllr_properties():
    rng = np.random.default_rng(6)
    upper_ok = True
    inv_ok = True
    for _ in range(100):
        n = int(rng.integers(60, 200))
        labels = np.zeros(n, dtype=bool)
        labels[: int(rng.integers(10, n - 10))] = True
        llrs = rng.standard_normal(n) * rng.uniform(0.5, 4.0) \
            + labels * rng.uniform(0.0, 3.0)
        mc = min_cllr_affine(llrs, labels)
        upper_ok &= mc <= weighted_cllr(llrs, labels) + 1e-12
        c = rng.uniform(0.1, 5.0) * rng.choice([-1.0, 1.0])
        dshift = rng.uniform(-4.0, 4.0)
        inv_ok &= abs(min_cllr_affine(c * llrs + dshift, labels) - mc) < 1e-9
    labels = np.zeros(600, dtype=bool)
    labels[:200] = True
    llrs = rng.standard_normal(600) * 1.7 + labels * 2.0 + 0.4
    grid = _grid_min_cllr(llrs, labels)
    opt = min_cllr_affine(llrs, labels)
    grid_ok = abs(opt - grid) < 1e-4
    _report(6, f"min_cllr <= cllr on 100 sets; affine-invariant to 1e-9; "
            f"grid oracle gap {abs(opt - grid):.2e} bits (want < 1e-4)",
            upper_ok and inv_ok and grid_ok)


# --------------------------------------------------------------------------
# 7: gradient check


def test_criterion_7_gradient_check():
    cfg = SynthConfig(d=4, speakers_per_group=(8,), samples_per_speaker=4,
                      seed=70)
    emb = generate(cfg)
    gen = PldaBackend(n_iters=10).fit(emb).model_
    bk = init_from_generative(gen)
    sub = emb.subset(np.arange(16))
    err_dp = gradient_check(bk, None, sub.vectors, sub.speakers,
                            sub.source_files, sub.durations)
    cond = ConditionCalibrator(proj_dim=gen.lda.shape[0], q=3,
                               cal_a=gen.cal_a, cal_b=gen.cal_b, seed=7)
    with torch.no_grad():  # move heads off zero so their gradients matter
        g = torch.Generator().manual_seed(8)
        cond.head_a += 0.2 * torch.randn(cond.head_a.shape,
                                         dtype=torch.float64, generator=g)
        cond.head_b += 0.2 * torch.randn(cond.head_b.shape,
                                         dtype=torch.float64, generator=g)
    err_dc = gradient_check(bk, cond, sub.vectors, sub.speakers,
                            sub.source_files, sub.durations)
    _report(7, f"max relative gradient error: DPLDA {err_dp:.2e}, "
            f"DCAPLDA {err_dc:.2e} (want < 1e-4)",
            err_dp < 1e-4 and err_dc < 1e-4)


# --------------------------------------------------------------------------
# 8: init equivalence


def test_criterion_8_init_equivalence():
    cfg = SynthConfig(d=6, speakers_per_group=(20,), samples_per_speaker=4,
                      seed=80)
    emb = generate(cfg)
    gen = PldaBackend(n_iters=10).fit(emb).model_
    bk = init_from_generative(gen)
    rng = np.random.default_rng(81)
    X1 = rng.standard_normal((1000, cfg.d))
    X2 = rng.standard_normal((1000, cfg.d))
    expected = gen.cal_a * plda_llr(gen.B, gen.W, gen.project(X1),
                                    gen.project(X2)) + gen.cal_b
    gap = float(np.max(np.abs(dplda_score(bk, X1, X2) - expected)))
    _report(8, f"init_from_generative max score gap = {gap:.2e} on 1000 "
            "random trials (want < 1e-9)", gap < 1e-9)


# --------------------------------------------------------------------------
# 9: bias phenomenon and its mitigation by balancing


def test_criterion_9_bias_phenomenon():
    base = SynthConfig(d=20, speakers_per_group=(200, 200),
                       samples_per_speaker=8, seed=11)
    skew = inject_skew(base, 0.10, 4.5)
    train_emb = generate(skew, id_prefix="tr_")
    eval_emb = generate(replace(skew, speakers_per_group=(70, 70),
                                seed=11 + 88), id_prefix="ev_")
    tr_groups = build_group_assignment(train_emb, min_speakers=1)
    ev_groups = build_group_assignment(eval_emb, min_speakers=1)
    trials = build_trials(eval_emb, within_groups=True)
    reports = {}
    for mode in ("none", "by-group"):
        est = PldaBackend(balance=mode, max_cal_trials=30000)
        est.fit(train_emb, groups=tr_groups)
        llr = est.score_trials(eval_emb, trials).llr
        reports[mode] = evaluate(eval_emb, trials, llr, ev_groups,
                                 n_boot=50, seed=0).per_group
    u, b = reports["none"], reports["by-group"]
    maj, mino = "g0", "g1"
    pfa_ratio_u = u[mino].p_fa / u[maj].p_fa
    cal_ratio_u = u[mino].cal_loss_bits / u[maj].cal_loss_bits
    cal_drop = 1.0 - b[mino].cal_loss_bits / u[mino].cal_loss_bits
    pfa_ratio_b = b[mino].p_fa / b[maj].p_fa
    maj_degrade = b[maj].cllr_bits / u[maj].cllr_bits - 1.0
    ok = (pfa_ratio_u >= 5.0 and cal_ratio_u >= 5.0 and cal_drop >= 0.5
          and pfa_ratio_b < 2.0 and maj_degrade < 0.10)
    _report(9, "unbalanced minority/majority p_fa "
            f"{pfa_ratio_u:.1f}x (>=5), cal loss {cal_ratio_u:.0f}x (>=5); "
            f"balanced: cal drop {100 * cal_drop:.0f}% (>=50%), p_fa ratio "
            f"{pfa_ratio_b:.2f} (<2), majority Cllr +{100 * maj_degrade:.1f}%"
            " (<10%)", ok)


# --------------------------------------------------------------------------
# 10: backend ordering on duration-heterogeneous, group-shifted data


def test_criterion_10_backend_ordering():
    base = SynthConfig(d=20, speakers_per_group=(200, 200),
                       samples_per_speaker=8, seed=7, B_scale=8.0,
                       dur_atten=0.6)
    skew = inject_skew(base, 0.10, 4.5)
    train_emb = generate(skew, id_prefix="tr_")
    dev_emb = generate(replace(skew, speakers_per_group=(60, 60), seed=57),
                       id_prefix="dv_")
    tr_groups = build_group_assignment(train_emb, min_speakers=1)
    dv_groups = build_group_assignment(dev_emb, min_speakers=1)
    i_ix, j_ix, dev_lab = sample_calibration_trials(
        dev_emb, max_non=50000, seed=0, within_groups=dv_groups)
    dev_trials = TrialList([dev_emb.ids[a] for a in i_ix],
                           [dev_emb.ids[b] for b in j_ix], dev_lab)

    plda_u = PldaBackend(balance="none", max_cal_trials=30000)
    plda_u.fit(train_emb, groups=tr_groups)
    c_plda = weighted_cllr(plda_u.score_trials(dev_emb, dev_trials).llr,
                           dev_lab)
    kwargs = dict(balance="by-group", epochs=22, warmup_epochs=20,
                  seeds=(0,), learning_rate=0.1, batch_size=128,
                  max_cal_trials=30000)
    best = {}
    for name, cls in (("dplda", DpldaBackend), ("dcaplda", DcapldaBackend)):
        kw = dict(kwargs)
        if name == "dcaplda":
            kw["condition_dim"] = 0
        est = cls(**kw)
        est.fit(train_emb, groups=tr_groups, dev_set=dev_emb,
                dev_groups=dv_groups)
        best[name] = min(r["dev_cllr"] for r in est.log_)
    gap1 = c_plda - best["dplda"]
    gap2 = best["dplda"] - best["dcaplda"]
    _report(10, f"dev Cllr PLDA-unbal {c_plda:.4f} >= DPLDA-bal "
            f"{best['dplda']:.4f} >= DCAPLDA-bal {best['dcaplda']:.4f}; "
            f"gaps {gap1:.4f}, {gap2:.4f} bits (each >= 0.01)",
            gap1 >= 0.01 and gap2 >= 0.01)


# --------------------------------------------------------------------------
# 11: speaker-bootstrap coverage


def test_criterion_11_bootstrap_coverage():
    cfg0 = SynthConfig(d=8, speakers_per_group=(50,), samples_per_speaker=4,
                       seed=0)
    # large-sample truth: Monte-Carlo Cllr of oracle LLRs (B = W = I here)
    rng = np.random.default_rng(424242)
    n_mc = 400000
    d = cfg0.d
    u = rng.standard_normal((n_mc, d))
    tar = plda_llr(cfg0.between_cov(), cfg0.within_cov(),
                   u + rng.standard_normal((n_mc, d)),
                   u + rng.standard_normal((n_mc, d)))
    non = plda_llr(cfg0.between_cov(), cfg0.within_cov(),
                   rng.standard_normal((n_mc, d)) +
                   rng.standard_normal((n_mc, d)),
                   rng.standard_normal((n_mc, d)) +
                   rng.standard_normal((n_mc, d)))
    truth = weighted_cllr(np.concatenate([tar, non]),
                          np.arange(2 * n_mc) < n_mc)

    def stat(llrs, labels, w):
        return weighted_cllr(llrs, labels, weights=w)

    n_reps = 200
    hits = 0
    for rep in range(n_reps):
        emb = generate(replace(cfg0, seed=1000 + rep))
        trials = build_trials(emb)
        llr = oracle_llr_set(replace(cfg0, seed=1000 + rep), emb, trials)
        lo, hi = bootstrap_ci(emb, trials, llr, stat, n_boot=300, seed=rep)
        hits += (lo <= truth <= hi)
    coverage = hits / n_reps
    _report(11, f"95% speaker-bootstrap CI covered truth {truth:.4f} in "
            f"{hits}/{n_reps} runs ({100 * coverage:.1f}%, want 95% +/- 5%)",
            0.90 <= coverage <= 1.00)


# --------------------------------------------------------------------------
# 12: trial construction counts and same-source exclusion


def test_criterion_12_trial_construction():
    ids = [f"c{k}" for k in range(6)]
    speakers = ["a", "a", "a", "b", "b", "c"]
    files = ["f0", "f1", "f2", "f3", "f3", "f4"]  # c3/c4 share a file
    emb = EmbeddingSet(ids, np.zeros((6, 2)), speakers,
                       ["g"] * 6, np.full(6, 16.0), files)
    trials = build_trials(emb)
    pairs = set(zip(trials.enroll_ids, trials.test_ids))
    count_ok = trials.n_trials == 14 and int(np.sum(trials.labels)) == 3
    excl_ok = ("c3", "c4") not in pairs and ("c4", "c3") not in pairs

    rng = np.random.default_rng(12)
    rand_ok = True
    for _ in range(20):
        n = int(rng.integers(5, 40))
        spk = [f"s{rng.integers(6)}" for _ in range(n)]
        src = [f"f{rng.integers(8)}" for _ in range(n)]
        e = EmbeddingSet([f"x{k}" for k in range(n)], np.zeros((n, 2)), spk,
                         ["g"] * n, np.full(n, 16.0), src)
        t = build_trials(e)
        expect = sum(1 for a in range(n) for b in range(a + 1, n)
                     if src[a] != src[b])
        tars = sum(1 for a in range(n) for b in range(a + 1, n)
                   if src[a] != src[b] and spk[a] == spk[b])
        rand_ok &= (t.n_trials == expect
                    and int(np.sum(t.labels)) == tars)
        got = set(zip(t.enroll_ids, t.test_ids))
        rand_ok &= all(src[int(a[1:])] != src[int(b[1:])] for a, b in got)
    _report(12, "build_trials matches exhaustive enumeration on the toy "
            "(14 pairs, 3 targets, same-file pair excluded) and on 20 "
            "random metadata sets", count_ok and excl_ok and rand_ok)
