"""Command-line orchestration.

Subcommands: make-trials, train, score, evaluate, synth. Parameters can be
set in a flat ``key = value`` config file and overridden on the command
line; the effective configuration is echoed into every output for
provenance. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import model_io
from .data import (build_group_assignment, load_embeddings, load_trials,
                   save_embeddings_binary, save_scores, save_trials)
from .discriminative import DcapldaBackend, DpldaBackend
from .errors import DataError, NumericalError
from .generative import PldaBackend, score_pipeline
from .metrics import evaluate as evaluate_metrics
from .metrics import score_histograms
from .synthetic import SynthConfig, generate
from .trials import build_trials


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def read_config(path) -> dict:
    """Flat ``key = value`` config file; '#' starts a comment."""
    cfg = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def _resolve(args, config, key, default=None, cast=str):
    """CLI flag > config file > default."""
    cli_val = getattr(args, key.replace("-", "_"), None)
    if cli_val is not None:
        return cli_val
    if key in config:
        return cast(config[key])
    return default


def _require_file(path, what):
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    return path


def _seeds(text):
    return tuple(int(s) for s in str(text).split(","))


def _floats(text):
    return tuple(float(s) for s in str(text).split(","))


def _ints(text):
    return tuple(int(s) for s in str(text).split(","))


def _effective_config_comment(cfg: dict) -> str:
    body = json.dumps(cfg, sort_keys=True)
    return f"# config: {body}\n"


def cmd_make_trials(args, config):
    emb = load_embeddings(_require_file(args.embeddings, "embeddings"))
    trials = build_trials(emb, within_groups=args.within_groups)
    save_trials(trials, args.out)
    print(f"wrote {trials.n_trials} trials to {args.out}")
    return 0


def cmd_train(args, config):
    backend = _resolve(args, config, "backend", "plda")
    balance = _resolve(args, config, "balance", "none")
    pi = _resolve(args, config, "pi", 0.05, float)
    lda_dim = _resolve(args, config, "lda_dim", None, int)
    epochs = _resolve(args, config, "epochs", 50, int)
    batch_size = _resolve(args, config, "batch_size", 128, int)
    learning_rate = _resolve(args, config, "learning_rate", 1e-3, float)
    seeds = _resolve(args, config, "seeds", (0, 1, 2), _seeds)
    min_speakers = _resolve(args, config, "min_speakers", 100, int)
    condition_dim = _resolve(args, config, "condition_dim", 6, int)
    warmup_epochs = _resolve(args, config, "warmup_epochs", 0, int)

    effective = {"backend": backend, "balance": balance, "pi": pi,
                 "lda_dim": lda_dim, "epochs": epochs, "batch_size": batch_size,
                 "learning_rate": learning_rate, "seeds": list(seeds),
                 "min_speakers": min_speakers, "warmup_epochs": warmup_epochs,
                 "train": args.train, "dev": args.dev}

    train_emb = load_embeddings(_require_file(args.train, "training embeddings"))
    groups = build_group_assignment(train_emb, min_speakers=min_speakers)
    if balance == "by-group" and backend in ("dplda", "dcaplda"):
        if batch_size % groups.n_groups != 0:
            raise DataError(f"batch_size {batch_size} not divisible by "
                            f"group count {groups.n_groups}")

    log_records = [{"config": effective}]
    if backend == "plda":
        est = PldaBackend(lda_dim=lda_dim, balance=balance, pi=pi)
        est.fit(train_emb, groups=groups)
        model_io.save_model(args.out, est.model_)
    elif backend in ("dplda", "dcaplda"):
        if args.dev is None:
            raise DataError(f"backend '{backend}' requires --dev embeddings")
        dev_emb = load_embeddings(_require_file(args.dev, "dev embeddings"))
        cls = DpldaBackend if backend == "dplda" else DcapldaBackend
        kwargs = dict(lda_dim=lda_dim, pi=pi, learning_rate=learning_rate,
                      batch_size=batch_size, epochs=epochs, seeds=seeds,
                      balance=balance, warmup_epochs=warmup_epochs)
        if backend == "dcaplda":
            kwargs["condition_dim"] = condition_dim
        est = cls(**kwargs)
        est.fit(train_emb, groups=groups, dev_set=dev_emb)
        model_io.save_model(args.out, est.backend_, est.condition_)
        log_records.extend(est.log_)
    else:
        raise DataError(f"unknown backend '{backend}'")

    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            for rec in log_records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote model to {args.out}")
    return 0


def _score_with_model(model_path, emb, trials):
    backend, condition = model_io.load_model(_require_file(model_path, "model"))
    from .generative import GenerativeBackend
    if isinstance(backend, GenerativeBackend):
        return score_pipeline(backend, emb, trials)
    from .data import ScoreSet
    from .discriminative import _score_set, _t
    idx = emb.index_of()
    try:
        i_ix = np.array([idx[e] for e in trials.enroll_ids])
        j_ix = np.array([idx[t] for t in trials.test_ids])
    except KeyError as e:
        raise DataError(f"trial references unknown sample id {e}")
    import torch
    with torch.no_grad():
        f = backend.project(_t(emb.vectors))
        raw = backend.raw_from_projected(f[i_ix], f[j_ix]).numpy()
    llr = _score_set(backend, condition, emb, i_ix, j_ix)
    return ScoreSet(raw=raw, llr=llr)


def cmd_score(args, config):
    emb = load_embeddings(_require_file(args.embeddings, "embeddings"))
    trials = load_trials(_require_file(args.trials, "trials"))
    trials.validate_against(emb)
    scores = _score_with_model(args.model, emb, trials)
    save_scores(trials, scores, args.out)
    print(f"wrote {trials.n_trials} scores to {args.out}")
    return 0


def cmd_evaluate(args, config):
    pi = _resolve(args, config, "pi", 0.05, float)
    alpha = _resolve(args, config, "alpha", 0.95, float)
    n_boot = _resolve(args, config, "n_boot", 1000, int)
    seed = _resolve(args, config, "seed", 0, int)
    min_speakers = _resolve(args, config, "min_speakers", 1, int)

    emb = load_embeddings(_require_file(args.embeddings, "embeddings"))
    trials = load_trials(_require_file(args.trials, "trials"))
    trials.validate_against(emb)
    scores = _score_with_model(args.model, emb, trials)
    groups = build_group_assignment(emb, min_speakers=min_speakers)

    report = evaluate_metrics(emb, trials, scores.llr, groups, pi=pi,
                              alpha=alpha, n_boot=n_boot, seed=seed)
    effective = {"pi": pi, "alpha": alpha, "n_boot": n_boot, "seed": seed,
                 "model": args.model, "embeddings": args.embeddings,
                 "trials": args.trials}

    os.makedirs(args.out_dir, exist_ok=True)
    payload = json.loads(report.to_json())
    payload["config"] = effective
    report_path = os.path.join(args.out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")

    # Cllr / min-Cllr bar data and per-group score-distribution TSVs
    header = _effective_config_comment(effective)
    with open(os.path.join(args.out_dir, "cllr_bars.tsv"), "w") as f:
        f.write(header)
        f.write("group\tcllr_bits\tmin_cllr_bits\tci_lo\tci_hi\n")
        for g, m in sorted(report.per_group.items()):
            f.write(f"{g}\t{m.cllr_bits:.6f}\t{m.min_cllr_bits:.6f}\t"
                    f"{m.cllr_ci[0]:.6f}\t{m.cllr_ci[1]:.6f}\n")

    idx = emb.index_of()
    label_of = groups.label_per_sample(emb.n_samples)
    trial_group = np.array([label_of[idx[e]] for e in trials.enroll_ids])
    labels = np.asarray(trials.labels, dtype=bool)
    for g in sorted(set(trial_group)):
        mask = trial_group == g
        centers, tar, non = score_histograms(scores.llr[mask], labels[mask])
        with open(os.path.join(args.out_dir, f"hist_{g}.tsv"), "w") as f:
            f.write(header)
            f.write("bin_center\ttar_density\tnon_density\n")
            for c_, t_, n_ in zip(centers, tar, non):
                f.write(f"{c_:.6f}\t{t_:.8f}\t{n_:.8f}\n")
    print(f"wrote report to {report_path}")
    return 0


def cmd_synth(args, config):
    d = _resolve(args, config, "d", 20, int)
    speakers_per_group = _resolve(args, config, "speakers_per_group", (100, 100), _ints)
    samples_per_speaker = _resolve(args, config, "samples_per_speaker", 8, int)
    b_scale = _resolve(args, config, "b_scale", 1.0, float)
    w_scale = _resolve(args, config, "w_scale", 1.0, float)
    shift_mags = _resolve(args, config, "group_shift_mags", None, _floats)
    group_scale = _resolve(args, config, "group_scale", None, _floats)
    seed = _resolve(args, config, "seed", 0, int)
    train_frac = _resolve(args, config, "train_frac", 0.6, float)
    dev_frac = _resolve(args, config, "dev_frac", 0.2, float)
    eval_frac = _resolve(args, config, "eval_frac", 0.2, float)
    if train_frac + dev_frac + eval_frac > 1.0 + 1e-9:
        raise DataError("split fractions exceed 1: splits would overlap")

    shifts = None
    if shift_mags is not None:
        if len(shift_mags) != len(speakers_per_group):
            raise DataError("group_shift_mags length must match group count")
        rng = np.random.default_rng(seed + 7919)
        shifts = tuple(m * _unit(rng, d) for m in shift_mags)
    cfg = SynthConfig(d=d, speakers_per_group=tuple(speakers_per_group),
                      samples_per_speaker=samples_per_speaker,
                      B_scale=b_scale, W_scale=w_scale,
                      group_shifts=shifts, group_scale=group_scale, seed=seed)
    emb = generate(cfg)

    os.makedirs(args.out_dir, exist_ok=True)
    splits = _split_by_speaker(emb, train_frac, dev_frac, eval_frac)
    for name, subset in splits.items():
        save_embeddings_binary(subset, os.path.join(args.out_dir, f"{name}.feb"))
    effective = {"d": d, "speakers_per_group": list(speakers_per_group),
                 "samples_per_speaker": samples_per_speaker,
                 "b_scale": b_scale, "w_scale": w_scale,
                 "group_shift_mags": list(shift_mags) if shift_mags else None,
                 "group_scale": list(group_scale) if group_scale else None,
                 "seed": seed, "train_frac": train_frac, "dev_frac": dev_frac,
                 "eval_frac": eval_frac}
    with open(os.path.join(args.out_dir, "synth_config.json"), "w") as f:
        json.dump(effective, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote splits to {args.out_dir}: "
          + ", ".join(f"{k}={v.n_samples}" for k, v in splits.items()))
    return 0


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _split_by_speaker(emb, train_frac, dev_frac, eval_frac):
    """Disjoint speaker splits, stratified by group."""
    by_group_spk = {}
    for spk, grp in zip(emb.speakers, emb.groups):
        by_group_spk.setdefault(grp, [])
        if spk not in by_group_spk[grp]:
            by_group_spk[grp].append(spk)
    assign = {}
    for grp, spks in by_group_spk.items():
        n = len(spks)
        n_train = round(train_frac * n)
        n_dev = round(dev_frac * n)
        n_eval = min(round(eval_frac * n), n - n_train - n_dev)
        for s in spks[:n_train]:
            assign[s] = "train"
        for s in spks[n_train:n_train + n_dev]:
            assign[s] = "dev"
        for s in spks[n_train + n_dev:n_train + n_dev + n_eval]:
            assign[s] = "eval"
    splits = {}
    for name in ("train", "dev", "eval"):
        ix = [i for i, s in enumerate(emb.speakers) if assign.get(s) == name]
        splits[name] = emb.subset(ix)
    return splits


def build_parser() -> _Parser:
    parser = _Parser(prog="fairsv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-trials", help="build a trial list from embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--within-groups", action="store_true",
                   help="exclude trials spanning two group labels")
    p.set_defaults(func=cmd_make_trials)

    p = sub.add_parser("train", help="train a backend")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--backend", choices=["plda", "dplda", "dcaplda"])
    p.add_argument("--balance", choices=["none", "by-group"])
    p.add_argument("--pi", type=float)
    p.add_argument("--lda-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--min-speakers", type=int)
    p.add_argument("--condition-dim", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score trials with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="per-group metrics report")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pi", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-boot", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-speakers", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic embedding splits")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--speakers-per-group", type=_ints)
    p.add_argument("--samples-per-speaker", type=int)
    p.add_argument("--b-scale", type=float)
    p.add_argument("--w-scale", type=float)
    p.add_argument("--group-shift-mags", type=_floats)
    p.add_argument("--group-scale", type=_floats)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--dev-frac", type=float)
    p.add_argument("--eval-frac", type=float)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = read_config(args.config) if getattr(args, "config", None) else {}
        return args.func(args, config)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
