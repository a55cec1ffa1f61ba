"""Discriminatively trained backends.

DPLDA keeps the generative pipeline's functional form (projection, length
normalization, second-order score, affine calibration) but trains all
parameters jointly by SGD on the prior-weighted binary cross-entropy.
DCAPLDA replaces the global calibration with a scale and offset computed
from a small condition network fed by the projected embeddings and the
log speech durations of the two trial sides.

Everything runs in float64 on CPU for deterministic, gradient-checkable
behavior.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import EmbeddingSet, GroupAssignment, ScoreSet, TrialList
from .errors import DataError, NumericalError
from .generative import (GenerativeBackend, PldaBackend,
                         sample_calibration_trials, two_cov_llr_params)
from .metrics import weighted_cllr

_DTYPE = torch.float64


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.array(x, dtype=np.float64, copy=True), dtype=_DTYPE)


class DiscriminativeBackend(torch.nn.Module):
    """Jointly trainable scoring pipeline with the PLDA functional form.

    raw(x1, x2) = f1' Lam f2 + f1' Gam f1 + f2' Gam f2 + c'(f1 + f2) + k,
    with f_i = length_normalize(L (x_i - m)). Lam and Gam are symmetrized
    in the forward pass, so score symmetry under swapping the trial sides
    holds by construction.
    """

    def __init__(self, m, L, Lam, Gam, c, k, cal_a, cal_b):
        super().__init__()
        self.m = torch.nn.Parameter(_t(m))
        self.L = torch.nn.Parameter(_t(L))
        self.Lam = torch.nn.Parameter(_t(Lam))
        self.Gam = torch.nn.Parameter(_t(Gam))
        self.c = torch.nn.Parameter(_t(c))
        self.k = torch.nn.Parameter(_t(k))
        self.cal_a = torch.nn.Parameter(_t(cal_a))
        self.cal_b = torch.nn.Parameter(_t(cal_b))

    @property
    def proj_dim(self) -> int:
        return self.L.shape[0]

    def project(self, X: torch.Tensor) -> torch.Tensor:
        g = (X - self.m) @ self.L.T
        norms = torch.linalg.norm(g, dim=-1, keepdim=True)
        if torch.any(norms == 0):
            raise NumericalError("projection produced a zero vector")
        p = g.shape[-1]
        return np.sqrt(p) * g / norms

    def raw_from_projected(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        Lam = 0.5 * (self.Lam + self.Lam.T)
        Gam = 0.5 * (self.Gam + self.Gam.T)
        cross = torch.einsum("ij,jk,ik->i", f1, Lam, f2)
        quad = (torch.einsum("ij,jk,ik->i", f1, Gam, f1)
                + torch.einsum("ij,jk,ik->i", f2, Gam, f2))
        return cross + quad + (f1 + f2) @ self.c + self.k

    def forward(self, X1: torch.Tensor, X2: torch.Tensor) -> torch.Tensor:
        raw = self.raw_from_projected(self.project(X1), self.project(X2))
        return self.cal_a * raw + self.cal_b


class ConditionCalibrator(torch.nn.Module):
    """Condition- and duration-dependent calibration head.

    z_i = tanh(A f_i + b0), augmented with ln(duration_i); the symmetric
    feature is phi = [z1 + z2, z1 * z2], so (alpha, beta) are invariant
    under swapping the two trial sides. alpha goes through softplus to
    stay positive.
    """

    def __init__(self, proj_dim: int, q: int = 6, cal_a: float = 1.0,
                 cal_b: float = 0.0, init_scale: float = 0.1, seed: int = 0,
                 ld_mean: float = 0.0, ld_scale: float = 1.0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        # log-duration standardisation constants (fixed at fit time, not
        # trained); raw ln(seconds) spans a few units, which destabilises
        # the bilinear head unless centred and scaled
        self.register_buffer("ld_mean", _t(ld_mean))
        self.register_buffer("ld_scale", _t(ld_scale))
        self.A = torch.nn.Parameter(
            init_scale * torch.randn(q, proj_dim, generator=gen, dtype=_DTYPE))
        self.b0 = torch.nn.Parameter(torch.zeros(q, dtype=_DTYPE))
        n_feat = 2 * (q + 1)
        self.head_a = torch.nn.Parameter(torch.zeros(n_feat, dtype=_DTYPE))
        self.head_b = torch.nn.Parameter(torch.zeros(n_feat, dtype=_DTYPE))
        # softplus^{-1}(cal_a) so the zero-weight head reproduces the
        # global calibration exactly
        self.bias_a = torch.nn.Parameter(_t(inverse_softplus(cal_a)))
        self.bias_b = torch.nn.Parameter(_t(cal_b))

    @property
    def q(self) -> int:
        return self.A.shape[0]

    def forward(self, f1, f2, log_dur1, log_dur2):
        d1 = (log_dur1 - self.ld_mean) / self.ld_scale
        d2 = (log_dur2 - self.ld_mean) / self.ld_scale
        z1 = torch.cat([torch.tanh(f1 @ self.A.T + self.b0),
                        d1.unsqueeze(-1)], dim=-1)
        z2 = torch.cat([torch.tanh(f2 @ self.A.T + self.b0),
                        d2.unsqueeze(-1)], dim=-1)
        phi = torch.cat([z1 + z2, z1 * z2], dim=-1)
        alpha = torch.nn.functional.softplus(phi @ self.head_a + self.bias_a)
        beta = phi @ self.head_b + self.bias_b
        return alpha, beta


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise DataError("softplus inverse requires a positive argument")
    return float(np.log(np.expm1(y)))


def init_from_generative(gen: GenerativeBackend) -> DiscriminativeBackend:
    """Closed-form (Lam, Gam, c, k) so raw scores match the generative
    PLDA LLR exactly; projection and calibration are copied."""
    Lam, Gam, k = two_cov_llr_params(gen.B, gen.W)
    mu = np.asarray(gen.plda_mu, dtype=np.float64)
    c = -(Lam @ mu + 2.0 * (Gam @ mu))
    k_full = k + mu @ Lam @ mu + 2.0 * (mu @ Gam @ mu)
    return DiscriminativeBackend(m=gen.mean, L=gen.lda, Lam=Lam, Gam=Gam,
                                 c=c, k=k_full, cal_a=gen.cal_a, cal_b=gen.cal_b)


def dplda_score(bk: DiscriminativeBackend, X1, X2) -> np.ndarray:
    """Calibrated DPLDA LLRs for aligned rows of X1 and X2 (numpy in/out)."""
    with torch.no_grad():
        out = bk(_t(np.atleast_2d(X1)), _t(np.atleast_2d(X2))).numpy()
    return out if out.size > 1 else float(out[0])


def dcaplda_score(bk: DiscriminativeBackend, cond: ConditionCalibrator,
                  X1, X2, dur1_s, dur2_s) -> np.ndarray:
    """Condition-aware LLRs: alpha * raw + beta with (alpha, beta) from the
    condition network and log durations."""
    d1 = np.atleast_1d(np.asarray(dur1_s, dtype=np.float64))
    d2 = np.atleast_1d(np.asarray(dur2_s, dtype=np.float64))
    if np.any(d1 <= 0) or np.any(d2 <= 0):
        raise DataError("durations must be positive")
    with torch.no_grad():
        f1 = bk.project(_t(np.atleast_2d(X1)))
        f2 = bk.project(_t(np.atleast_2d(X2)))
        raw = bk.raw_from_projected(f1, f2)
        alpha, beta = cond(f1, f2, _t(np.log(d1)), _t(np.log(d2)))
        out = (alpha * raw + beta).numpy()
    return out if out.size > 1 else float(out[0])


@dataclass
class TrainConfig:
    pi: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    seeds: tuple = (0, 1, 2)
    balance: str = "none"
    clip_norm: float = 10.0
    dev_max_non_trials: int = 50000
    warmup_epochs: int = 0  # calibration-only epochs before joint training

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise DataError(f"pi must be in (0,1), got {self.pi}")
        if self.balance not in ("none", "by-group"):
            raise DataError(f"unknown balance mode '{self.balance}'")


def make_balanced_batches(groups: GroupAssignment, batch_size: int, seed: int = 0):
    """Batches with batch_size / n_groups samples from every group.

    The largest group is traversed exactly once per epoch; smaller groups
    cycle through reshuffled re-traversals. Yields index arrays.
    """
    n_groups = groups.n_groups
    if batch_size % n_groups != 0:
        raise DataError(
            f"batch_size {batch_size} not divisible by group count {n_groups}")
    per_group = batch_size // n_groups
    rng = np.random.default_rng(seed)
    labels = groups.labels
    pools = {g: rng.permutation(groups.by_group[g]) for g in labels}
    cursors = {g: 0 for g in labels}
    major = max(labels, key=lambda g: len(groups.by_group[g]))
    n_batches = len(groups.by_group[major]) // per_group
    for _ in range(n_batches):
        batch = []
        for g in labels:
            pool = pools[g]
            take = []
            while len(take) < per_group:
                if cursors[g] >= len(pool):
                    pool = rng.permutation(groups.by_group[g])
                    pools[g] = pool
                    cursors[g] = 0
                take.append(pool[cursors[g]])
                cursors[g] += 1
            batch.extend(take)
        yield np.array(batch, dtype=np.intp)


def _plain_batches(n: int, batch_size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def _batch_pairs(speakers, source_files, group_labels=None):
    """Within-batch trial pairs (i < j), same-source pairs excluded.

    When per-sample group labels are given, cross-group pairs are excluded
    too, matching the within-group trial design used for calibration and
    evaluation.
    """
    nb = len(speakers)
    i_ix, j_ix = np.triu_indices(nb, k=1)
    src = np.asarray(source_files)
    keep = src[i_ix] != src[j_ix]
    if group_labels is not None:
        grp = np.asarray(group_labels)
        keep &= grp[i_ix] == grp[j_ix]
    i_ix, j_ix = i_ix[keep], j_ix[keep]
    spk = np.asarray(speakers)
    labels = spk[i_ix] == spk[j_ix]
    return i_ix, j_ix, labels


def _batch_loss(bk, cond, X, log_dur, i_ix, j_ix, labels, pi):
    """Prior-weighted cross-entropy (nats) of within-batch trials."""
    f = bk.project(X)
    raw = bk.raw_from_projected(f[i_ix], f[j_ix])
    if cond is None:
        llr = bk.cal_a * raw + bk.cal_b
    else:
        alpha, beta = cond(f[i_ix], f[j_ix], log_dur[i_ix], log_dur[j_ix])
        llr = alpha * raw + beta
    tau = np.log(pi / (1.0 - pi))
    z = llr + tau
    lab = torch.as_tensor(labels)
    tar_loss = torch.nn.functional.softplus(-z[lab]).mean()
    non_loss = torch.nn.functional.softplus(z[~lab]).mean()
    return pi * tar_loss + (1.0 - pi) * non_loss


def _score_set(bk, cond, emb: EmbeddingSet, i_ix, j_ix) -> np.ndarray:
    with torch.no_grad():
        X = _t(emb.vectors)
        f = bk.project(X)
        raw = bk.raw_from_projected(f[i_ix], f[j_ix])
        if cond is None:
            llr = bk.cal_a * raw + bk.cal_b
        else:
            log_dur = _t(np.log(emb.durations))
            alpha, beta = cond(f[i_ix], f[j_ix], log_dur[i_ix], log_dur[j_ix])
            llr = alpha * raw + beta
    return llr.numpy()


def train(bk: DiscriminativeBackend, cond, train_set: EmbeddingSet,
          dev_set: EmbeddingSet, cfg: TrainConfig,
          groups: GroupAssignment = None,
          dev_groups: GroupAssignment = None):
    """SGD on prior-weighted cross-entropy over within-batch trials.

    Evaluates dev weighted Cllr after every epoch (and before the first)
    and returns (backend, condition, log) for the best (epoch, seed) by
    dev Cllr. The log is a list of dicts {seed, epoch, train_loss,
    dev_cllr}; epoch 0 is the starting point.
    """
    dev_i, dev_j, dev_labels = sample_calibration_trials(
        dev_set, max_non=cfg.dev_max_non_trials, seed=0,
        within_groups=dev_groups)
    if not dev_labels.any() or dev_labels.all():
        raise DataError("dev set must contain both trial classes")
    if cfg.balance == "by-group":
        if groups is None:
            raise DataError("balance='by-group' requires a group assignment")

    log = []
    best = None  # (dev_cllr, seed, epoch, bk_state, cond_state)
    for seed in cfg.seeds:
        bk_s = copy.deepcopy(bk)
        cond_s = copy.deepcopy(cond) if cond is not None else None
        if cond_s is not None:
            # condition head supersedes the global calibration
            cal_params = list(cond_s.parameters())
            params = [p for n, p in bk_s.named_parameters()
                      if n not in ("cal_a", "cal_b")]
            params += cal_params
        else:
            cal_params = [bk_s.cal_a, bk_s.cal_b]
            params = list(bk_s.parameters())
        opt_full = torch.optim.SGD(params, lr=cfg.learning_rate)
        opt_cal = torch.optim.SGD(cal_params, lr=cfg.learning_rate)

        def dev_cllr():
            llr = _score_set(bk_s, cond_s, dev_set, dev_i, dev_j)
            return weighted_cllr(llr, dev_labels, pi=cfg.pi)

        d0 = dev_cllr()
        log.append({"seed": seed, "epoch": 0, "train_loss": None, "dev_cllr": d0})
        if best is None or d0 < best[0]:
            best = (d0, seed, 0, copy.deepcopy(bk_s.state_dict()),
                    copy.deepcopy(cond_s.state_dict()) if cond_s else None)

        X_all = _t(train_set.vectors)
        log_dur_all = _t(np.log(train_set.durations))
        spk = np.array(train_set.speakers)
        src = np.array(train_set.source_files)
        grp = None
        if groups is not None:
            grp = np.array(groups.label_per_sample(train_set.n_samples))
        for epoch in range(1, cfg.epochs + 1):
            warm = epoch <= cfg.warmup_epochs
            opt = opt_cal if warm else opt_full
            step_params = cal_params if warm else params
            if cfg.balance == "by-group":
                batches = make_balanced_batches(groups, cfg.batch_size,
                                                seed=seed * 100003 + epoch)
            else:
                batches = _plain_batches(train_set.n_samples, cfg.batch_size,
                                         seed=seed * 100003 + epoch)
            epoch_loss, n_batches = 0.0, 0
            for b_num, batch in enumerate(batches):
                pair_grp = grp[batch] if grp is not None else None
                i_ix, j_ix, labels = _batch_pairs(spk[batch], src[batch],
                                                  pair_grp)
                if not labels.any() or labels.all():
                    continue
                loss = _batch_loss(bk_s, cond_s, X_all[batch], log_dur_all[batch],
                                   i_ix, j_ix, labels, cfg.pi)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, batch {b_num}")
                opt_full.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(step_params, cfg.clip_norm)
                opt.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            mean_loss = epoch_loss / max(n_batches, 1)
            d = dev_cllr()
            log.append({"seed": seed, "epoch": epoch,
                        "train_loss": mean_loss, "dev_cllr": d})
            if d < best[0]:
                best = (d, seed, epoch, copy.deepcopy(bk_s.state_dict()),
                        copy.deepcopy(cond_s.state_dict()) if cond_s else None)

    bk_out = copy.deepcopy(bk)
    bk_out.load_state_dict(best[3])
    cond_out = None
    if cond is not None:
        cond_out = copy.deepcopy(cond)
        cond_out.load_state_dict(best[4])
    return bk_out, cond_out, log


def gradient_check(bk: DiscriminativeBackend, cond, X, speakers, source_files,
                   durations, pi: float = 0.05, epsilon: float = 1e-5) -> float:
    """Max relative error of autograd gradients vs central finite
    differences over every parameter coordinate."""
    i_ix, j_ix, labels = _batch_pairs(speakers, source_files)
    if not labels.any() or labels.all():
        raise DataError("gradient check batch must contain both classes")
    X_t = _t(np.atleast_2d(X))
    log_dur = _t(np.log(np.asarray(durations, dtype=np.float64)))

    modules = [bk] + ([cond] if cond is not None else [])

    def loss_value():
        return _batch_loss(bk, cond, X_t, log_dur, i_ix, j_ix, labels, pi)

    loss = loss_value()
    for mod in modules:
        mod.zero_grad()
    loss.backward()

    max_err = 0.0
    with torch.no_grad():
        for mod in modules:
            for param in mod.parameters():
                grad = param.grad.reshape(-1) if param.grad is not None \
                    else torch.zeros(param.numel(), dtype=_DTYPE)
                flat = param.reshape(-1)
                for idx in range(flat.numel()):
                    orig = float(flat[idx])
                    flat[idx] = orig + epsilon
                    up = float(loss_value())
                    flat[idx] = orig - epsilon
                    down = float(loss_value())
                    flat[idx] = orig
                    fd = (up - down) / (2 * epsilon)
                    ga = float(grad[idx])
                    err = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
                    max_err = max(max_err, err)
    return max_err


class DpldaBackend(BaseEstimator):
    """DPLDA estimator: generative fit, closed-form init, joint SGD."""

    def __init__(self, lda_dim=None, pi=0.05, learning_rate=1e-3,
                 batch_size=128, epochs=50, seeds=(0, 1, 2), balance="none",
                 n_em_iters=50, max_cal_trials=50000, warmup_epochs=0):
        self.lda_dim = lda_dim
        self.pi = pi
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seeds = seeds
        self.balance = balance
        self.n_em_iters = n_em_iters
        self.max_cal_trials = max_cal_trials
        self.warmup_epochs = warmup_epochs

    condition_dim = None  # no condition network

    def _make_condition(self, gen, emb):
        return None

    def fit(self, emb: EmbeddingSet, groups: GroupAssignment = None,
            dev_set: EmbeddingSet = None,
            dev_groups: GroupAssignment = None):
        if dev_set is None:
            raise DataError("discriminative training requires a dev set")
        gen_est = PldaBackend(lda_dim=self.lda_dim, n_iters=self.n_em_iters,
                              balance=self.balance, pi=self.pi,
                              max_cal_trials=self.max_cal_trials)
        gen_est.fit(emb, groups=groups)
        bk0 = init_from_generative(gen_est.model_)
        cond0 = self._make_condition(gen_est.model_, emb)
        cfg = TrainConfig(pi=self.pi, learning_rate=self.learning_rate,
                          batch_size=self.batch_size, epochs=self.epochs,
                          seeds=tuple(self.seeds), balance=self.balance,
                          warmup_epochs=self.warmup_epochs)
        self.backend_, self.condition_, self.log_ = train(
            bk0, cond0, emb, dev_set, cfg, groups=groups,
            dev_groups=dev_groups)
        self.generative_ = gen_est.model_
        return self

    def score_trials(self, emb: EmbeddingSet, trials: TrialList) -> ScoreSet:
        idx = emb.index_of()
        try:
            i_ix = np.array([idx[e] for e in trials.enroll_ids])
            j_ix = np.array([idx[t] for t in trials.test_ids])
        except KeyError as e:
            raise DataError(f"trial references unknown sample id {e}")
        llr = _score_set(self.backend_, self.condition_, emb, i_ix, j_ix)
        with torch.no_grad():
            f = self.backend_.project(_t(emb.vectors))
            raw = self.backend_.raw_from_projected(f[i_ix], f[j_ix]).numpy()
        return ScoreSet(raw=raw, llr=llr)


class DcapldaBackend(DpldaBackend):
    """DCAPLDA estimator: DPLDA plus condition-aware calibration."""

    def __init__(self, lda_dim=None, pi=0.05, learning_rate=1e-3,
                 batch_size=128, epochs=50, seeds=(0, 1, 2), balance="none",
                 n_em_iters=50, max_cal_trials=50000, warmup_epochs=0,
                 condition_dim=6, condition_seed=0):
        super().__init__(lda_dim=lda_dim, pi=pi, learning_rate=learning_rate,
                         batch_size=batch_size, epochs=epochs, seeds=seeds,
                         balance=balance, n_em_iters=n_em_iters,
                         max_cal_trials=max_cal_trials,
                         warmup_epochs=warmup_epochs)
        self.condition_dim = condition_dim
        self.condition_seed = condition_seed

    def _make_condition(self, gen: GenerativeBackend, emb: EmbeddingSet):
        ld = np.log(emb.durations)
        scale = float(ld.std())
        return ConditionCalibrator(proj_dim=gen.lda.shape[0],
                                   q=self.condition_dim, cal_a=gen.cal_a,
                                   cal_b=gen.cal_b, seed=self.condition_seed,
                                   ld_mean=float(ld.mean()),
                                   ld_scale=scale if scale > 0 else 1.0)
