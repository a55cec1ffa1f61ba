"""Calibration-sensitive evaluation metrics.

Conventions: LLRs and decision thresholds are in natural log; Cllr values
are reported in bits. The prior offset tau = ln(pi/(1-pi)) sits inside the
cross-entropy so that the metric's implied decision threshold coincides
with the Bayes threshold ln((1-pi)/pi).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import minimize

from .data import EmbeddingSet, GroupAssignment, TrialList
from .errors import DataError, NumericalError

LOG2 = np.log(2.0)


def _log_sigmoid(x):
    """Numerically stable ln sigma(x)."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _check_classes(labels, weights=None):
    labels = np.asarray(labels, dtype=bool)
    if weights is None:
        has_tar, has_non = labels.any(), (~labels).any()
    else:
        weights = np.asarray(weights, dtype=np.float64)
        has_tar = weights[labels].sum() > 0
        has_non = weights[~labels].sum() > 0
    if not (has_tar and has_non):
        raise DataError("both target and non-target trials are required")
    return labels


def weighted_cllr(llrs, labels, pi: float = 0.05, weights=None) -> float:
    """Prior-weighted Cllr in bits.

    Cllr_pi = -pi * mean_tar[log2 sigma(llr + tau)]
              - (1-pi) * mean_non[log2 sigma(-llr - tau)],  tau = ln(pi/(1-pi)).

    ``weights`` are optional per-trial weights; class means become weighted
    means (used by the speaker-level bootstrap and balanced calibration).
    """
    if not 0.0 < pi < 1.0:
        raise DataError(f"pi must be in (0,1), got {pi}")
    labels = _check_classes(labels, weights)
    llrs = np.asarray(llrs, dtype=np.float64)
    tau = np.log(pi / (1.0 - pi))
    shifted = llrs + tau
    if weights is None:
        tar_term = -np.mean(_log_sigmoid(shifted[labels]))
        non_term = -np.mean(_log_sigmoid(-shifted[~labels]))
    else:
        w = np.asarray(weights, dtype=np.float64)
        tar_term = -np.average(_log_sigmoid(shifted[labels]), weights=w[labels])
        non_term = -np.average(_log_sigmoid(-shifted[~labels]), weights=w[~labels])
    return (pi * tar_term + (1.0 - pi) * non_term) / LOG2


def _cllr_objective(params, scores, labels, pi, weights):
    """Weighted-cross-entropy value (nats) and gradient wrt (a, b)."""
    a, b = params
    tau = np.log(pi / (1.0 - pi))
    z = a * scores + b + tau
    sign = np.where(labels, 1.0, -1.0)
    logp = _log_sigmoid(sign * z)
    # d(-ln sigma(s*z))/dz = -s * sigma(-s*z)
    dz = -sign * np.exp(_log_sigmoid(-sign * z))
    if weights is None:
        w = np.ones_like(z)
    else:
        w = np.asarray(weights, dtype=np.float64)
    wt = np.where(labels, pi * w / w[labels].sum(), (1.0 - pi) * w / w[~labels].sum())
    val = -np.sum(wt * logp)
    grad_z = wt * dz
    return val, np.array([np.sum(grad_z * scores), np.sum(grad_z)])


def fit_affine_calibration(scores, labels, pi: float = 0.05, weights=None,
                           gtol: float = 1e-8):
    """(a, b) minimizing the prior-weighted cross-entropy of a*s + b.

    The problem is convex in (a, b); solved by L-BFGS with analytic
    gradients to the requested gradient norm.
    """
    labels = _check_classes(labels, weights)
    scores = np.asarray(scores, dtype=np.float64)
    res = minimize(_cllr_objective, x0=np.array([1.0, 0.0]), jac=True,
                   args=(scores, labels, pi, weights), method="L-BFGS-B",
                   options={"gtol": gtol, "ftol": 0.0, "maxiter": 5000})
    grad_norm = float(np.max(np.abs(res.jac)))
    if not np.isfinite(res.fun):
        raise NumericalError("calibration objective became non-finite")
    if grad_norm > 100 * gtol:
        # polish with a few Newton-free restarts at perturbed points
        best = res
        for scale in (0.1, 10.0):
            r = minimize(_cllr_objective, x0=np.array([scale, 0.0]), jac=True,
                         args=(scores, labels, pi, weights), method="L-BFGS-B",
                         options={"gtol": gtol, "ftol": 0.0, "maxiter": 5000})
            if r.fun < best.fun:
                best = r
        res = best
    return float(res.x[0]), float(res.x[1])


def min_cllr_affine(llrs, labels, pi: float = 0.05, weights=None) -> float:
    """Cllr after the best affine score transform (bits).

    Degenerate score sets (all values equal) return the prior entropy
    H(pi), the cost of the best constant LLR.
    """
    labels = _check_classes(labels, weights)
    llrs = np.asarray(llrs, dtype=np.float64)
    if np.ptp(llrs) == 0.0:
        return float(-(pi * np.log2(pi) + (1 - pi) * np.log2(1 - pi)))
    a, b = fit_affine_calibration(llrs, labels, pi=pi, weights=weights, gtol=1e-9)
    val = weighted_cllr(a * llrs + b, labels, pi=pi, weights=weights)
    return float(min(val, weighted_cllr(llrs, labels, pi=pi, weights=weights)))


def bayes_threshold(pi: float) -> float:
    """Decision threshold ln((1-pi)/pi) in nats."""
    if not 0.0 < pi < 1.0:
        raise DataError(f"pi must be in (0,1), got {pi}")
    return float(np.log((1.0 - pi) / pi))


def error_rates(llrs, labels, threshold: float, weights=None):
    """(p_fa, p_miss) at the given threshold; ties (llr == threshold) accept."""
    labels = _check_classes(labels, weights)
    llrs = np.asarray(llrs, dtype=np.float64)
    accept = llrs >= threshold
    if weights is None:
        p_fa = float(np.mean(accept[~labels]))
        p_miss = float(np.mean(~accept[labels]))
    else:
        w = np.asarray(weights, dtype=np.float64)
        p_fa = float(np.average(accept[~labels], weights=w[~labels]))
        p_miss = float(np.average(~accept[labels], weights=w[labels]))
    return p_fa, p_miss


def fdr(per_group_rates, alpha: float = 0.95) -> float:
    """Fairness Discrepancy Rate over per-group (p_fa, p_miss) pairs.

    FDR = 1 - (alpha * max|dp_fa| + (1-alpha) * max|dp_miss|); 1.0 is
    perfectly fair.
    """
    rates = list(per_group_rates)
    if len(rates) < 2:
        raise DataError("FDR needs at least two groups")
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must be in [0,1], got {alpha}")
    fas = np.array([r[0] for r in rates])
    misses = np.array([r[1] for r in rates])
    return float(1.0 - (alpha * np.ptp(fas) + (1.0 - alpha) * np.ptp(misses)))


def bootstrap_ci(emb: EmbeddingSet, trials: TrialList, llrs, statistic,
                 n_boot: int = 1000, confidence: float = 0.95, seed: int = 0):
    """Speaker-level bootstrap percentile interval for a score statistic.

    Speakers are resampled with replacement; each trial enters a replicate
    with multiplicity equal to the product of its two speakers' resample
    counts, passed to ``statistic(llrs, labels, weights)`` as weights.
    Replicates that lose one class entirely are redrawn (up to 10 tries).
    """
    if n_boot < 2:
        raise DataError("n_boot must be >= 2")
    if not 0.0 < confidence < 1.0:
        raise DataError("confidence must be in (0,1)")
    llrs = np.asarray(llrs, dtype=np.float64)
    labels = np.asarray(trials.labels, dtype=bool)
    idx = emb.index_of()
    spk_of = {sid: emb.speakers[i] for sid, i in idx.items()}
    speakers = sorted(set(emb.speakers))
    spk_index = {s: k for k, s in enumerate(speakers)}
    s1 = np.array([spk_index[spk_of[e]] for e in trials.enroll_ids])
    s2 = np.array([spk_index[spk_of[t]] for t in trials.test_ids])
    n_spk = len(speakers)

    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    for r in range(n_boot):
        for attempt in range(10):
            counts = np.bincount(rng.integers(0, n_spk, size=n_spk), minlength=n_spk)
            w = counts[s1] * counts[s2]
            wt = w.astype(np.float64)
            if wt[labels].sum() > 0 and wt[~labels].sum() > 0:
                break
        else:
            raise DataError("bootstrap replicate lost a class 10 times in a row")
        stats[r] = statistic(llrs, labels, wt)
    lo_q = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(stats, [lo_q, 1.0 - lo_q])
    return float(lo), float(hi)


@dataclass(frozen=True)
class GroupMetrics:
    cllr_bits: float
    min_cllr_bits: float
    cal_loss_bits: float
    p_fa: float
    p_miss: float
    n_tar: int
    n_non: int
    cllr_ci: tuple


@dataclass(frozen=True)
class MetricsReport:
    per_group: dict          # label -> GroupMetrics
    fdr: float               # None when only one group
    threshold_nats: float
    pi: float
    alpha: float

    def to_json(self, **kwargs) -> str:
        payload = {
            "per_group": {g: asdict(m) for g, m in sorted(self.per_group.items())},
            "global": {"fdr": self.fdr, "threshold_nats": self.threshold_nats,
                       "pi": self.pi, "alpha": self.alpha},
        }
        return json.dumps(payload, sort_keys=True, **kwargs)


def evaluate(emb: EmbeddingSet, trials: TrialList, llrs, groups: GroupAssignment,
             pi: float = 0.05, alpha: float = 0.95, n_boot: int = 1000,
             seed: int = 0) -> MetricsReport:
    """Per-group metrics at the shared Bayes threshold plus cross-group FDR.

    Every trial must be within-group; a trial spanning two groups is an
    error (evaluation groups are built per-group by construction).
    """
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.size != trials.n_trials:
        raise DataError("llrs not aligned with trials")
    idx = emb.index_of()
    label_of = groups.label_per_sample(emb.n_samples)
    trial_group = []
    for e, t in zip(trials.enroll_ids, trials.test_ids):
        ge, gt = label_of[idx[e]], label_of[idx[t]]
        if ge != gt:
            raise DataError(f"trial ({e}, {t}) spans groups '{ge}' and '{gt}'")
        trial_group.append(ge)
    trial_group = np.array(trial_group)

    threshold = bayes_threshold(pi)
    labels = np.asarray(trials.labels, dtype=bool)
    per_group = {}
    for g in sorted(set(trial_group)):
        mask = trial_group == g
        g_llrs, g_labels = llrs[mask], labels[mask]
        cllr = weighted_cllr(g_llrs, g_labels, pi=pi)
        min_cllr = min_cllr_affine(g_llrs, g_labels, pi=pi)
        p_fa, p_miss = error_rates(g_llrs, g_labels, threshold)
        sub_ids = set(np.array(trials.enroll_ids)[mask]) | set(np.array(trials.test_ids)[mask])
        sub_emb = emb.subset([idx[s] for s in sorted(sub_ids)])
        sub_trials = TrialList(np.array(trials.enroll_ids)[mask],
                               np.array(trials.test_ids)[mask], g_labels)
        ci = bootstrap_ci(sub_emb, sub_trials, g_llrs,
                          lambda s, l, w: weighted_cllr(s, l, pi=pi, weights=w),
                          n_boot=n_boot, seed=seed)
        per_group[g] = GroupMetrics(
            cllr_bits=float(cllr), min_cllr_bits=float(min_cllr),
            cal_loss_bits=float(cllr - min_cllr), p_fa=p_fa, p_miss=p_miss,
            n_tar=int(g_labels.sum()), n_non=int((~g_labels).sum()), cllr_ci=ci)

    fdr_value = None
    if len(per_group) >= 2:
        fdr_value = fdr([(m.p_fa, m.p_miss) for m in per_group.values()], alpha=alpha)
    return MetricsReport(per_group=per_group, fdr=fdr_value,
                         threshold_nats=threshold, pi=pi, alpha=alpha)


def score_histograms(llrs, labels, n_bins: int = 60):
    """Per-class score densities on shared bins: (bin_centers, tar, non)."""
    llrs = np.asarray(llrs, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    lo, hi = llrs.min(), llrs.max()
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    tar, _ = np.histogram(llrs[labels], bins=edges, density=True)
    non, _ = np.histogram(llrs[~labels], bins=edges, density=True)
    return centers, tar, non
