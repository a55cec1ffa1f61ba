"""Synthetic generator and oracle LLRs."""

import numpy as np
import pytest
from dataclasses import replace

from fairsv import (DataError, SynthConfig, build_trials, generate,
                    inject_skew, min_cllr_affine, oracle_llr, oracle_llr_set,
                    weighted_cllr)


def test_generate_shapes_and_metadata():
    cfg = SynthConfig(d=5, speakers_per_group=(4, 3), samples_per_speaker=2,
                      seed=0)
    emb = generate(cfg)
    assert emb.n_samples == 14
    assert emb.dim == 5
    assert len(set(emb.speakers)) == 7
    assert set(emb.groups) == {"g0", "g1"}
    # each sample has its own source file
    assert len(set(emb.source_files)) == emb.n_samples
    assert np.all(emb.durations >= cfg.dur_min_s)
    assert np.all(emb.durations <= cfg.dur_max_s)


def test_generate_deterministic():
    cfg = SynthConfig(d=4, speakers_per_group=(5,), samples_per_speaker=3,
                      seed=7)
    a = generate(cfg)
    b = generate(cfg)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.array_equal(a.durations, b.durations)
    c = generate(replace(cfg, seed=8))
    assert not np.array_equal(a.vectors, c.vectors)


def test_generate_group_structure():
    shift = np.full(6, 3.0)
    cfg = SynthConfig(d=6, speakers_per_group=(40, 40),
                      samples_per_speaker=4, seed=1,
                      group_shifts=(np.zeros(6), shift),
                      group_scale=(1.0, 4.0))
    emb = generate(cfg)
    g0 = emb.vectors[np.array(emb.groups) == "g0"]
    g1 = emb.vectors[np.array(emb.groups) == "g1"]
    gap = g1.mean(axis=0) - g0.mean(axis=0)
    assert np.linalg.norm(gap - shift) < 0.25 * np.linalg.norm(shift)
    # group 1 within-speaker spread is about twice group 0's
    def within_std(vecs, speakers):
        spk = np.array(speakers)
        resid = []
        for s in set(spk):
            rows = vecs[spk == s]
            resid.append(rows - rows.mean(axis=0))
        return np.vstack(resid).std()
    spk = np.array(emb.speakers)
    s0 = within_std(g0, spk[np.array(emb.groups) == "g0"])
    s1 = within_std(g1, spk[np.array(emb.groups) == "g1"])
    assert s1 / s0 == pytest.approx(2.0, rel=0.15)


def test_dur_noise_inflates_short_durations():
    cfg = SynthConfig(d=10, speakers_per_group=(60,), samples_per_speaker=6,
                      seed=2, dur_noise=1.0)
    emb = generate(cfg)
    base = generate(replace(cfg, dur_noise=0.0))
    assert np.array_equal(emb.durations, base.durations)
    # residual magnitude grows for short cuts
    diff = np.linalg.norm(emb.vectors - base.vectors, axis=1)
    short = emb.durations < 20.0
    long = emb.durations > 120.0
    assert diff[short].mean() > 2.0 * diff[long].mean()
    # extra noise decreases monotonically toward the maximum duration
    assert np.corrcoef(np.log(emb.durations), diff)[0, 1] < -0.5


def test_oracle_llr_against_plda_llr():
    cfg = SynthConfig(d=3, speakers_per_group=(2, 2), samples_per_speaker=2,
                      seed=3, group_shifts=(np.zeros(3), np.ones(3)),
                      group_scale=(1.0, 2.0))
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((2, 3))
    from fairsv import plda_llr
    # group g1: shift removed, within-cov scaled
    expected = plda_llr(cfg.between_cov(), 2.0 * cfg.within_cov(),
                        x1 - 1.0, x2 - 1.0)
    assert oracle_llr(cfg, "g1", x1, x2) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(DataError, match="unknown group"):
        oracle_llr(cfg, "g9", x1, x2)


def test_oracle_llrs_are_calibrated():
    # matched data: the oracle LLR has near-zero calibration loss
    cfg = SynthConfig(d=6, speakers_per_group=(60,), samples_per_speaker=6,
                      seed=5)
    emb = generate(cfg)
    trials = build_trials(emb)
    llrs = oracle_llr_set(cfg, emb, trials)
    labels = np.asarray(trials.labels)
    assert labels.sum() >= 800 and (~labels).sum() >= 10000
    cllr = weighted_cllr(llrs, labels)
    cal_loss = cllr - min_cllr_affine(llrs, labels)
    assert cal_loss < 0.01


def test_inject_skew():
    cfg = SynthConfig(d=8, speakers_per_group=(100, 100), seed=6)
    skew = inject_skew(cfg, minority_fraction=0.1, shift_magnitude=3.0)
    assert skew.speakers_per_group == (180, 20)
    shifts = skew.group_shifts
    assert np.allclose(shifts[0], 0.0)
    assert np.linalg.norm(shifts[1]) == pytest.approx(3.0)
    # deterministic direction given the base seed
    skew2 = inject_skew(cfg, 0.1, 3.0)
    assert np.array_equal(shifts[1], skew2.group_shifts[1])
    with pytest.raises(DataError):
        inject_skew(cfg, 0.0, 3.0)


def test_config_validation():
    cfg = SynthConfig(d=2, group_scale=(1.0, -1.0))
    with pytest.raises(DataError, match="positive"):
        generate(cfg)
