"""Model file round trips for all three backend types."""

import numpy as np
import pytest
import torch

from fairsv import (ConditionCalibrator, DataError, PldaBackend, SynthConfig,
                    build_trials, dcaplda_score, dplda_score, generate,
                    init_from_generative, load_model, model_summary,
                    save_model, score_pipeline)


def fitted_generative(seed=0):
    cfg = SynthConfig(d=6, speakers_per_group=(15,), samples_per_speaker=4,
                      seed=seed)
    emb = generate(cfg)
    return PldaBackend(n_iters=10).fit(emb).model_, emb


def test_plda_roundtrip(tmp_path):
    gen, emb = fitted_generative()
    path = tmp_path / "model.fsvm"
    save_model(path, gen)
    back, cond = load_model(path)
    assert cond is None
    trials = build_trials(emb)
    orig = score_pipeline(gen, emb, trials)
    loaded = score_pipeline(back, emb, trials)
    assert np.array_equal(orig.llr, loaded.llr)
    assert np.array_equal(orig.raw, loaded.raw)


def test_dplda_roundtrip(tmp_path):
    gen, emb = fitted_generative(seed=1)
    bk = init_from_generative(gen)
    path = tmp_path / "model.fsvm"
    save_model(path, bk)
    back, cond = load_model(path)
    assert cond is None
    rng = np.random.default_rng(2)
    X1 = rng.standard_normal((20, emb.dim))
    X2 = rng.standard_normal((20, emb.dim))
    assert np.array_equal(dplda_score(bk, X1, X2), dplda_score(back, X1, X2))


def test_dcaplda_roundtrip(tmp_path):
    gen, emb = fitted_generative(seed=3)
    bk = init_from_generative(gen)
    cond = ConditionCalibrator(proj_dim=gen.lda.shape[0], q=4,
                               cal_a=gen.cal_a, cal_b=gen.cal_b, seed=5)
    with torch.no_grad():
        g = torch.Generator().manual_seed(6)
        cond.head_a += 0.3 * torch.randn(cond.head_a.shape, dtype=torch.float64, generator=g)
        cond.head_b += 0.3 * torch.randn(cond.head_b.shape, dtype=torch.float64, generator=g)
    path = tmp_path / "model.fsvm"
    save_model(path, bk, condition=cond)
    back, cond_back = load_model(path)
    assert cond_back is not None
    rng = np.random.default_rng(7)
    X1 = rng.standard_normal((20, emb.dim))
    X2 = rng.standard_normal((20, emb.dim))
    d1 = rng.uniform(4.0, 240.0, 20)
    d2 = rng.uniform(4.0, 240.0, 20)
    assert np.array_equal(dcaplda_score(bk, cond, X1, X2, d1, d2),
                          dcaplda_score(back, cond_back, X1, X2, d1, d2))


def test_model_file_errors(tmp_path):
    path = tmp_path / "bad.fsvm"
    path.write_bytes(b"NOPE" + b"\x00" * 10)
    with pytest.raises(DataError, match="not a model file"):
        load_model(path)
    with pytest.raises(DataError, match="serialize"):
        save_model(path, object())
    gen, _ = fitted_generative(seed=8)
    good = tmp_path / "good.fsvm"
    save_model(good, gen)
    data = good.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_model(path)


def test_model_summary():
    gen, _ = fitted_generative(seed=9)
    text = model_summary(gen)
    assert "type: plda" in text
    assert "cal_a" in text and "lda" in text
    bk = init_from_generative(gen)
    cond = ConditionCalibrator(proj_dim=gen.lda.shape[0], q=4)
    assert "type: dplda" in model_summary(bk)
    assert "type: dcaplda" in model_summary(bk, cond)
    assert "cond.A" in model_summary(bk, cond)
