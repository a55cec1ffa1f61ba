"""Generative test harness: sample embeddings from a known two-covariance
model with injectable per-group bias, and compute exact oracle LLRs.

Bias is modeled as a per-group mean shift plus an optional per-group
within-covariance scale, the minimal mechanism that reproduces the
non-target score shift seen on under-represented groups while keeping the
oracle LLR closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import EmbeddingSet
from .errors import DataError
from .generative import plda_llr
from .trials import sample_training_durations


@dataclass(frozen=True)
class SynthConfig:
    d: int = 20
    speakers_per_group: tuple = (100, 100)
    samples_per_speaker: int = 8
    B_scale: float = 1.0            # B_true = B_scale * I unless B_true given
    W_scale: float = 1.0
    B_true: np.ndarray = None       # d x d PSD
    W_true: np.ndarray = None       # d x d PD
    group_shifts: tuple = None      # per-group d-vectors; default all zero
    group_scale: tuple = None       # per-group within-cov multipliers; default 1
    dur_min_s: float = 4.0
    dur_max_s: float = 240.0
    dur_noise: float = 0.0          # duration-dependent noise exponent
    dur_atten: float = 0.0          # speaker-info attenuation exponent
    seed: int = 0

    @property
    def n_groups(self) -> int:
        return len(self.speakers_per_group)

    def group_names(self) -> list:
        return [f"g{k}" for k in range(self.n_groups)]

    def between_cov(self) -> np.ndarray:
        if self.B_true is not None:
            return np.asarray(self.B_true, dtype=np.float64)
        return self.B_scale * np.eye(self.d)

    def within_cov(self) -> np.ndarray:
        if self.W_true is not None:
            return np.asarray(self.W_true, dtype=np.float64)
        return self.W_scale * np.eye(self.d)

    def shift(self, k: int) -> np.ndarray:
        if self.group_shifts is None:
            return np.zeros(self.d)
        return np.asarray(self.group_shifts[k], dtype=np.float64)

    def scale(self, k: int) -> float:
        if self.group_scale is None:
            return 1.0
        s = float(self.group_scale[k])
        if s <= 0:
            raise DataError("group_scale entries must be positive")
        return s


def generate(cfg: SynthConfig, id_prefix: str = "") -> EmbeddingSet:
    """Sample an embedding set: u_s ~ N(shift_g, B), x ~ N(u_s, scale_g * W).

    Each sample gets its own source-file id, so trial construction applies
    no same-file exclusions on synthetic data. Deterministic per seed.
    """
    B = cfg.between_cov()
    W = cfg.within_cov()
    rng = np.random.default_rng(cfg.seed)
    B_chol = np.linalg.cholesky(B + 1e-12 * np.eye(cfg.d))
    W_chol = np.linalg.cholesky(W)

    ids, speakers, groups, files = [], [], [], []
    shifts, spk_rows, noise_rows = [], [], []
    for k, (gname, n_spk) in enumerate(zip(cfg.group_names(), cfg.speakers_per_group)):
        shift = cfg.shift(k)
        scale = np.sqrt(cfg.scale(k))
        for s in range(n_spk):
            spk_id = f"{id_prefix}{gname}_spk{s:04d}"
            u = B_chol @ rng.standard_normal(cfg.d)
            for j in range(cfg.samples_per_speaker):
                e = scale * (W_chol @ rng.standard_normal(cfg.d))
                sid = f"{spk_id}_x{j}"
                ids.append(sid)
                speakers.append(spk_id)
                groups.append(gname)
                files.append(f"{sid}_src")
                shifts.append(shift)
                spk_rows.append(u)
                noise_rows.append(e)
    durations = sample_training_durations(
        len(ids), cfg.dur_min_s, cfg.dur_max_s,
        seed=int(rng.integers(2**31)))
    # Speaker-information attenuation: short cuts carry a shrunken speaker
    # component, t = (dur / dur_max)**dur_atten in (0, 1]; zero exponent
    # leaves the data untouched.
    t = (durations / cfg.dur_max_s) ** cfg.dur_atten if cfg.dur_atten > 0 \
        else np.ones(len(ids))
    X = (np.vstack(shifts) + t[:, None] * np.vstack(spk_rows)
         + np.vstack(noise_rows))
    if cfg.dur_noise > 0:
        # Duration-heterogeneous corruption: shorter cuts get extra within
        # noise, with variance multiplier (dur_max / dur)**dur_noise >= 1.
        # Applied on top of the base draw so dur_noise=0 data is unchanged.
        mult = (cfg.dur_max_s / durations) ** cfg.dur_noise
        sample_scale = np.array([np.sqrt(cfg.scale(cfg.group_names().index(g)))
                                 for g in groups])
        extra = np.sqrt(np.maximum(mult - 1.0, 0.0)) * sample_scale
        X = X + extra[:, None] * (rng.standard_normal(X.shape) @ W_chol.T)
    return EmbeddingSet(ids, X, speakers, groups, durations, files)


def oracle_llr(cfg: SynthConfig, group: str, x1, x2):
    """Exact LLR under the group's true generative model (nats).

    Exact only when dur_noise and dur_atten are both zero;
    duration-dependent corruption is not part of the closed-form model.
    """
    names = cfg.group_names()
    if group not in names:
        raise DataError(f"unknown group '{group}'")
    k = names.index(group)
    shift = cfg.shift(k)
    B = cfg.between_cov()
    W = cfg.scale(k) * cfg.within_cov()
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64)) - shift
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64)) - shift
    return plda_llr(B, W, x1, x2)


def oracle_llr_set(cfg: SynthConfig, emb: EmbeddingSet, trials) -> np.ndarray:
    """Oracle LLRs for every trial of a generated set (within-group trials)."""
    idx = emb.index_of()
    i_ix = np.array([idx[e] for e in trials.enroll_ids])
    j_ix = np.array([idx[t] for t in trials.test_ids])
    out = np.empty(trials.n_trials)
    trial_groups = np.array([emb.groups[i] for i in i_ix])
    for g in np.unique(trial_groups):
        mask = trial_groups == g
        out[mask] = np.atleast_1d(
            oracle_llr(cfg, g, emb.vectors[i_ix[mask]], emb.vectors[j_ix[mask]]))
    return out


def inject_skew(cfg: SynthConfig, minority_fraction: float,
                shift_magnitude: float) -> SynthConfig:
    """Two-group config: a minority holding the given fraction of the total
    speakers, mean-shifted by the given magnitude along a random unit
    direction (seeded from the base config)."""
    if not 0.0 < minority_fraction < 1.0:
        raise DataError("minority_fraction must be in (0,1)")
    total = sum(cfg.speakers_per_group)
    n_minor = max(1, round(minority_fraction * total))
    n_major = total - n_minor
    rng = np.random.default_rng(cfg.seed + 7919)
    direction = rng.standard_normal(cfg.d)
    direction /= np.linalg.norm(direction)
    shifts = (np.zeros(cfg.d), shift_magnitude * direction)
    return replace(cfg, speakers_per_group=(n_major, n_minor),
                   group_shifts=shifts)
