"""Classical scoring pipeline: centering, weighted LDA, length normalization,
two-covariance PLDA with sample weights, closed-form LLR scoring, and global
affine calibration.

The two-covariance model is x = mu + u_s + e with u_s ~ N(0, B) and
e ~ N(0, W). Group balancing enters as per-sample weights applied to every
sum over samples, in centering, LDA, PLDA EM, and calibration alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator

from .data import EmbeddingSet, GroupAssignment, ScoreSet, TrialList
from .errors import DataError, NumericalError
from .metrics import fit_affine_calibration


def compute_balancing_weights(groups: GroupAssignment, n_samples: int = None) -> np.ndarray:
    """Per-sample weights w_i = 1 / (G * n_g); each group totals 1/G.

    Equal-sized groups reduce to uniform weights summing to 1.
    """
    if groups.n_groups == 0:
        raise DataError("empty group assignment")
    for g, ix in groups.by_group.items():
        if len(ix) == 0:
            raise DataError(f"group '{g}' has no samples")
    if n_samples is None:
        n_samples = sum(len(ix) for ix in groups.by_group.values())
    w = np.zeros(n_samples)
    n_groups = groups.n_groups
    for ix in groups.by_group.values():
        w[ix] = 1.0 / (n_groups * len(ix))
    if np.any(w == 0):
        raise DataError("group assignment does not cover all samples")
    return w


def _normalize_weights(weights, n: int) -> np.ndarray:
    """Weights scaled to mean 1, so overall scaling never affects fits."""
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise DataError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or w.sum() <= 0:
        raise DataError("weights must be non-negative with positive sum")
    return w * (n / w.sum())


def _speaker_indices(speakers):
    """Sample indices per speaker, in first-appearance order."""
    order = {}
    for i, s in enumerate(speakers):
        order.setdefault(s, []).append(i)
    return order


def fit_lda(X, speakers, weights=None, p: int = None) -> np.ndarray:
    """Weighted LDA projection; rows are the top-p generalized eigenvectors
    of between-speaker vs within-speaker scatter.

    Signs are fixed by making the largest-magnitude entry of each row
    positive, so the result is fully deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    spk_ix = _speaker_indices(speakers)
    n_spk = len(spk_ix)
    if n_spk < 2:
        raise DataError("LDA needs at least two speakers")
    if p is None:
        p = min(d, n_spk - 1)
    if p > min(d, n_spk - 1):
        raise DataError(f"p={p} exceeds min(d, n_speakers-1)={min(d, n_spk - 1)}")
    w = _normalize_weights(weights, n)

    mean = np.average(X, axis=0, weights=w)
    Sb = np.zeros((d, d))
    Sw = np.zeros((d, d))
    for ix in spk_ix.values():
        ix = np.asarray(ix)
        ws = w[ix]
        ns = ws.sum()
        mu_s = np.average(X[ix], axis=0, weights=ws)
        diff = mu_s - mean
        Sb += ns * np.outer(diff, diff)
        R = X[ix] - mu_s
        Sw += (R * ws[:, None]).T @ R
    total_w = w.sum()
    Sb /= total_w
    Sw /= total_w

    # regularize within scatter minimally to keep the pencil definite
    Sw = Sw + 1e-10 * np.trace(Sw) / d * np.eye(d)
    try:
        eigvals, eigvecs = sla.eigh(Sb, Sw)
    except sla.LinAlgError as e:
        raise NumericalError(f"generalized eigensolve failed: {e}")
    order = np.argsort(eigvals)[::-1][:p]
    L = eigvecs[:, order].T
    for r in range(L.shape[0]):
        jmax = np.argmax(np.abs(L[r]))
        if L[r, jmax] < 0:
            L[r] = -L[r]
    return L


def length_normalize(x) -> np.ndarray:
    """sqrt(p) * x / ||x||, applied per row for matrices."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        norm = np.linalg.norm(x)
        if norm == 0:
            raise DataError("cannot length-normalize a zero vector")
        return np.sqrt(x.size) * x / norm
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot length-normalize a zero vector")
    return np.sqrt(x.shape[1]) * x / norms


def fit_plda(X, speakers, weights=None, n_iters: int = 50, tol: float = 1e-6):
    """Weighted EM for the two-covariance model.

    The sample weights w_i decompose into a speaker-level weight
    nu_s = sum_{i in s} w_i scaling speaker s's entire likelihood term
    (prior included), and within-speaker relative weights rescaled to sum
    to the sample count. This keeps the balancing effective at the
    speaker level: without the nu_s factor the per-speaker prior terms
    would be dominated by majority-group speakers regardless of w.

    Returns (mu, B, W, ll_history). The weighted log-likelihood per sample
    is non-decreasing; iteration stops early once the improvement drops
    below ``tol`` per sample. Weights are normalized internally, so results
    are invariant to overall weight scaling; uniform weights reproduce the
    unweighted EM trajectory exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    spk_ix = {s: np.asarray(ix) for s, ix in _speaker_indices(speakers).items()}
    if len(spk_ix) < 2:
        raise DataError("PLDA needs at least two speakers")
    if not any(len(ix) >= 2 for ix in spk_ix.values()):
        raise DataError("PLDA needs at least one speaker with two samples")
    w = _normalize_weights(weights, n)
    n_spk = len(spk_ix)

    # speaker weights nu_s (mean 1) and within-speaker weights summing to n_s
    nu = {}
    w_rel = {}
    for s, ix in spk_ix.items():
        ws = w[ix]
        tot = ws.sum()
        if tot <= 0:
            raise DataError(f"speaker '{s}' has zero total weight")
        nu[s] = tot
        w_rel[s] = ws * (len(ix) / tot)
    nu_norm = n_spk / sum(nu.values())
    nu = {s: v * nu_norm for s, v in nu.items()}
    total_eff = sum(nu[s] * w_rel[s].sum() for s in spk_ix)

    mu = np.average(X, axis=0, weights=w)
    # moment-based init: within from weighted residuals, between from speaker means
    Sw = np.zeros((p, p))
    Sb = np.zeros((p, p))
    for s, ix in spk_ix.items():
        ws = nu[s] * w_rel[s]
        mu_s = np.average(X[ix], axis=0, weights=ws)
        R = X[ix] - mu_s
        Sw += (R * ws[:, None]).T @ R
        diff = mu_s - mu
        Sb += nu[s] * np.outer(diff, diff)
    W = Sw / total_eff + 1e-6 * np.eye(p)
    B = Sb / n_spk + 1e-6 * np.eye(p)

    ll_history = []
    prev_ll = -np.inf
    for it in range(n_iters):
        try:
            W_inv = sla.inv(W)
            B_inv = sla.inv(B)
            _, logdet_W = np.linalg.slogdet(W)
            _, logdet_B = np.linalg.slogdet(B)
        except sla.LinAlgError:
            raise NumericalError(f"singular covariance at EM iteration {it}")

        ll = 0.0
        B_new = np.zeros((p, p))
        W_acc = np.zeros((p, p))
        mu_acc = np.zeros(p)
        post = {}
        for s, ix in spk_ix.items():
            ws = w_rel[s]
            ns = ws.sum()
            Xc = X[ix] - mu
            h = W_inv @ (ws @ Xc)
            P = B_inv + ns * W_inv
            C = sla.inv(P)
            m = C @ h
            post[s] = (ix, ws, ns, m, C)

            quad = np.einsum("ij,jk,ik->i", Xc, W_inv, Xc)
            ll_s = -0.5 * (ns * (p * np.log(2 * np.pi) + logdet_W) + ws @ quad)
            _, logdet_P = np.linalg.slogdet(P)
            ll_s += -0.5 * (logdet_B + logdet_P) + 0.5 * h @ m
            ll += nu[s] * ll_s

            B_new += nu[s] * (C + np.outer(m, m))
            mu_acc += nu[s] * (ws @ (X[ix] - m))
        ll /= total_eff
        ll_history.append(ll)
        if not np.isfinite(ll):
            raise NumericalError(f"non-finite log-likelihood at EM iteration {it}")

        mu_new = mu_acc / total_eff
        for s, (ix, ws, ns, m, C) in post.items():
            R = X[ix] - mu_new - m
            W_acc += nu[s] * ((R * ws[:, None]).T @ R + ns * C)
        mu = mu_new
        B = B_new / n_spk
        W = W_acc / total_eff

        if ll - prev_ll < tol and it > 0:
            break
        prev_ll = ll

    return mu, 0.5 * (B + B.T), 0.5 * (W + W.T), np.array(ll_history)


def two_cov_llr_params(B, W):
    """(Lambda, Gamma, k) such that the zero-mean two-covariance LLR is
    x1' Lambda x2 + x1' Gamma x1 + x2' Gamma x2 + k."""
    B = np.asarray(B, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    T = B + W
    try:
        T_inv = sla.inv(T)
        Q = sla.inv(T - B @ T_inv @ B)
    except sla.LinAlgError:
        raise NumericalError("total covariance not invertible in LLR computation")
    sign_T, logdet_T = np.linalg.slogdet(T)
    sign_S, logdet_TBTB = np.linalg.slogdet(T - B @ T_inv @ B)
    if sign_T <= 0 or sign_S <= 0:
        raise NumericalError("total covariance not positive definite")
    Lam = Q @ B @ T_inv
    Gam = 0.5 * (T_inv - Q)
    k = 0.5 * (logdet_T - logdet_TBTB)
    return 0.5 * (Lam + Lam.T), 0.5 * (Gam + Gam.T), float(k)


def plda_llr(B, W, x1, x2) -> np.ndarray:
    """Closed-form two-covariance LLR (nats) for zero-mean inputs.

    Accepts single vectors or aligned matrices of row vectors; symmetric
    in (x1, x2).
    """
    Lam, Gam, k = two_cov_llr_params(B, W)
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    out = (np.einsum("ij,jk,ik->i", x1, Lam, x2)
           + np.einsum("ij,jk,ik->i", x1, Gam, x1)
           + np.einsum("ij,jk,ik->i", x2, Gam, x2) + k)
    return out if out.size > 1 else float(out[0])


fit_calibration = fit_affine_calibration


@dataclass(frozen=True)
class GenerativeBackend:
    """Fitted parameters of the generative scoring pipeline."""

    mean: np.ndarray      # d
    lda: np.ndarray       # p x d
    plda_mu: np.ndarray   # p
    B: np.ndarray         # p x p, PSD
    W: np.ndarray         # p x p, PD
    cal_a: float
    cal_b: float

    def project(self, X) -> np.ndarray:
        """center -> LDA -> length-normalize -> subtract PLDA mean."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return length_normalize((X - self.mean) @ self.lda.T) - self.plda_mu


def sample_calibration_trials(emb: EmbeddingSet, max_non: int = 50000,
                              max_tar: int = 50000, seed: int = 0,
                              within_groups: GroupAssignment = None):
    """Training trials for calibration: all same-speaker pairs (capped) plus
    sampled different-speaker pairs, same-source-file pairs excluded.

    When ``within_groups`` is given, different-speaker pairs are drawn
    within groups only, matching the per-group evaluation design.

    Returns (i, j, labels) index arrays.
    """
    rng = np.random.default_rng(seed)
    group_of = None
    if within_groups is not None:
        group_of = within_groups.label_per_sample(emb.n_samples)
    spk_ix = {}
    for i, s in enumerate(emb.speakers):
        spk_ix.setdefault(s, []).append(i)
    tar_pairs = []
    for ix in spk_ix.values():
        for a in range(len(ix)):
            for b in range(a + 1, len(ix)):
                i, j = ix[a], ix[b]
                if emb.source_files[i] != emb.source_files[j]:
                    tar_pairs.append((i, j))
    if len(tar_pairs) > max_tar:
        keep = rng.choice(len(tar_pairs), size=max_tar, replace=False)
        tar_pairs = [tar_pairs[k] for k in sorted(keep)]
    n = emb.n_samples
    if n * (n - 1) // 2 <= 4 * max_non:
        # small sets: enumerate eligible pairs and subsample
        cand = [(i, j) for i in range(n) for j in range(i + 1, n)
                if emb.speakers[i] != emb.speakers[j]
                and (group_of is None or group_of[i] == group_of[j])]
        if len(cand) > max_non:
            keep = rng.choice(len(cand), size=max_non, replace=False)
            cand = [cand[k] for k in sorted(keep)]
        non_pairs = set(cand)
    else:
        non_pairs = set()
        attempts = 0
        while len(non_pairs) < max_non and attempts < 20 * max_non:
            attempts += 1
            i, j = rng.integers(0, n, size=2)
            if i == j:
                continue
            if i > j:
                i, j = j, i
            if emb.speakers[i] == emb.speakers[j]:
                continue
            if group_of is not None and group_of[i] != group_of[j]:
                continue
            non_pairs.add((int(i), int(j)))
    pairs = tar_pairs + sorted(non_pairs)
    if not tar_pairs or not non_pairs:
        raise DataError("calibration trial sampling produced a one-class set")
    i_ix = np.array([p[0] for p in pairs])
    j_ix = np.array([p[1] for p in pairs])
    labels = np.array([emb.speakers[a] == emb.speakers[b]
                       for a, b in pairs], dtype=bool)
    return i_ix, j_ix, labels


class PldaBackend(BaseEstimator):
    """Estimator wrapping the full generative pipeline.

    Parameters
    ----------
    lda_dim : target LDA dimension; default min(d, n_speakers - 1, 150).
    n_iters, tol : PLDA EM schedule.
    balance : "none" or "by-group"; by-group applies inverse group-size
        sample weights throughout the pipeline.
    pi : prior for the calibration objective.
    max_cal_trials : cap on sampled different-speaker calibration pairs.
    seed : controls calibration-trial sampling only; fitting is deterministic.
    """

    def __init__(self, lda_dim=None, n_iters=50, tol=1e-6, balance="none",
                 pi=0.05, max_cal_trials=50000, seed=0):
        self.lda_dim = lda_dim
        self.n_iters = n_iters
        self.tol = tol
        self.balance = balance
        self.pi = pi
        self.max_cal_trials = max_cal_trials
        self.seed = seed

    def fit(self, emb: EmbeddingSet, groups: GroupAssignment = None):
        if self.balance not in ("none", "by-group"):
            raise DataError(f"unknown balance mode '{self.balance}'")
        if self.balance == "by-group":
            if groups is None:
                raise DataError("balance='by-group' requires a group assignment")
            weights = compute_balancing_weights(groups, emb.n_samples)
        else:
            weights = np.ones(emb.n_samples)
        w = _normalize_weights(weights, emb.n_samples)

        X = emb.vectors
        n_spk = len(set(emb.speakers))
        p = self.lda_dim or min(emb.dim, n_spk - 1, 150)

        mean = np.average(X, axis=0, weights=w)
        L = fit_lda(X - mean, emb.speakers, weights=w, p=p)
        F = length_normalize((X - mean) @ L.T)
        plda_mu, B, W, ll = fit_plda(F, emb.speakers, weights=w,
                                     n_iters=self.n_iters, tol=self.tol)

        i_ix, j_ix, labels = sample_calibration_trials(
            emb, max_non=self.max_cal_trials, seed=self.seed,
            within_groups=groups)
        G = F - plda_mu
        raw = plda_llr(B, W, G[i_ix], G[j_ix])
        trial_w = w[i_ix] * w[j_ix]
        cal_a, cal_b = fit_calibration(raw, labels, pi=self.pi, weights=trial_w)

        self.model_ = GenerativeBackend(mean=mean, lda=L, plda_mu=plda_mu,
                                        B=B, W=W, cal_a=cal_a, cal_b=cal_b)
        self.em_ll_ = ll
        return self

    def score_trials(self, emb: EmbeddingSet, trials: TrialList) -> ScoreSet:
        return score_pipeline(self.model_, emb, trials)


def score_pipeline(bk: GenerativeBackend, emb: EmbeddingSet,
                   trials: TrialList) -> ScoreSet:
    """raw = PLDA LLR after center/LDA/length-norm/mu-subtract;
    llr = cal_a * raw + cal_b."""
    idx = emb.index_of()
    try:
        i_ix = np.array([idx[e] for e in trials.enroll_ids])
        j_ix = np.array([idx[t] for t in trials.test_ids])
    except KeyError as e:
        raise DataError(f"trial references unknown sample id {e}")
    G = bk.project(emb.vectors)
    raw = np.atleast_1d(plda_llr(bk.B, bk.W, G[i_ix], G[j_ix]))
    return ScoreSet(raw=raw, llr=bk.cal_a * raw + bk.cal_b)
