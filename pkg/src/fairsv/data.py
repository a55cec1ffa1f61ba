"""Core records: embedding sets, trial lists, score sets, group assignments.

All containers are immutable after construction and safe to share across
threads. File formats:

  * Embedding text format: header line ``#dim=<d>``, then one sample per
    line: ``id<TAB>speaker<TAB>group<TAB>duration_s<TAB>source_file<TAB>v1 v2 ... vd``.
  * Embedding binary format: magic ``FSEB1``, little-endian u32 n, u32 d,
    a metadata block of length-prefixed UTF-8 strings plus a little-endian
    f64 duration per sample, then the n x d vectors as little-endian f32.
  * Trial list: TSV ``enroll_id<TAB>test_id<TAB>{tgt|non}``.
  * Scores: TSV ``enroll_id<TAB>test_id<TAB>raw<TAB>llr``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

BINARY_MAGIC = b"FSEB1"
OTHER_GROUP = "other"

TARGET = "tgt"
NONTARGET = "non"


def _frozen_array(x, dtype=np.float64, ndim=None) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=dtype)
    if ndim is not None and a.ndim != ndim:
        raise DataError(f"expected {ndim}-d array, got shape {a.shape}")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    """Fixed-dimension vectors with per-sample metadata.

    Attributes:
      ids: unique sample identifiers, one per row of ``vectors``.
      vectors: (n_samples, d) matrix.
      speakers: speaker id per sample.
      groups: group label per sample.
      durations: speech seconds per sample, strictly positive.
      source_files: original-file id per sample (drives trial exclusions).
    """

    ids: tuple
    vectors: np.ndarray
    speakers: tuple
    groups: tuple
    durations: np.ndarray
    source_files: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "speakers", tuple(str(s) for s in self.speakers))
        object.__setattr__(self, "groups", tuple(str(g) for g in self.groups))
        object.__setattr__(self, "source_files", tuple(str(f) for f in self.source_files))
        object.__setattr__(self, "vectors", _frozen_array(self.vectors, ndim=2))
        object.__setattr__(self, "durations", _frozen_array(self.durations, ndim=1))
        n = len(self.ids)
        if self.vectors.shape[0] != n:
            raise DataError(f"{n} ids but {self.vectors.shape[0]} vector rows")
        if self.vectors.shape[1] < 1:
            raise DataError("embedding dimension must be >= 1")
        for name, seq in (("speakers", self.speakers), ("groups", self.groups),
                          ("durations", self.durations), ("source_files", self.source_files)):
            if len(seq) != n:
                raise DataError(f"{name} has length {len(seq)}, expected {n}")
        if n and not np.all(self.durations > 0):
            bad = int(np.argmin(self.durations > 0))
            raise DataError(f"non-positive duration for sample '{self.ids[bad]}'")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DataError(f"duplicate sample id '{dup}'")

    @property
    def n_samples(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index_of(self) -> dict:
        """Mapping sample id -> row index."""
        return {sid: i for i, sid in enumerate(self.ids)}

    def subset(self, indices) -> "EmbeddingSet":
        indices = np.asarray(indices, dtype=int)
        return EmbeddingSet(
            ids=[self.ids[i] for i in indices],
            vectors=self.vectors[indices],
            speakers=[self.speakers[i] for i in indices],
            groups=[self.groups[i] for i in indices],
            durations=self.durations[indices],
            source_files=[self.source_files[i] for i in indices],
        )


@dataclass(frozen=True)
class TrialList:
    """Pairs of sample ids with same-speaker (tgt) / different-speaker (non) labels."""

    enroll_ids: tuple
    test_ids: tuple
    labels: np.ndarray  # bool, True = same speaker

    def __post_init__(self):
        object.__setattr__(self, "enroll_ids", tuple(str(i) for i in self.enroll_ids))
        object.__setattr__(self, "test_ids", tuple(str(i) for i in self.test_ids))
        object.__setattr__(self, "labels", _frozen_array(self.labels, dtype=bool, ndim=1))
        n = len(self.enroll_ids)
        if len(self.test_ids) != n or len(self.labels) != n:
            raise DataError("trial fields have inconsistent lengths")
        for e, t in zip(self.enroll_ids, self.test_ids):
            if e == t:
                raise DataError(f"trial pairs sample '{e}' with itself")

    @property
    def n_trials(self) -> int:
        return len(self.enroll_ids)

    def validate_against(self, emb: EmbeddingSet) -> None:
        """Check ids resolve and labels match speaker metadata."""
        idx = emb.index_of()
        for e, t, lab in zip(self.enroll_ids, self.test_ids, self.labels):
            if e not in idx:
                raise DataError(f"trial references unknown sample id '{e}'")
            if t not in idx:
                raise DataError(f"trial references unknown sample id '{t}'")
            same = emb.speakers[idx[e]] == emb.speakers[idx[t]]
            if bool(lab) != same:
                raise DataError(f"trial ({e}, {t}) label disagrees with speaker metadata")


@dataclass(frozen=True)
class ScoreSet:
    """Raw scores and calibrated LLRs (natural log), aligned 1:1 with a TrialList."""

    raw: np.ndarray
    llr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "raw", _frozen_array(self.raw, ndim=1))
        object.__setattr__(self, "llr", _frozen_array(self.llr, ndim=1))
        if self.raw.shape != self.llr.shape:
            raise DataError("raw and llr have different lengths")
        if self.raw.size and not (np.all(np.isfinite(self.raw)) and np.all(np.isfinite(self.llr))):
            raise DataError("scores contain non-finite values")


@dataclass(frozen=True)
class GroupAssignment:
    """Partition of sample indices into groups; small groups merged into 'other'."""

    by_group: dict = field(default_factory=dict)  # label -> np.ndarray of indices

    def __post_init__(self):
        frozen = {str(g): _frozen_array(ix, dtype=np.intp, ndim=1)
                  for g, ix in self.by_group.items()}
        object.__setattr__(self, "by_group", frozen)
        all_ix = np.concatenate([ix for ix in frozen.values()]) if frozen else np.array([], int)
        if len(np.unique(all_ix)) != len(all_ix):
            raise DataError("group assignment is not a partition (overlapping indices)")

    @property
    def labels(self) -> list:
        return sorted(self.by_group)

    @property
    def n_groups(self) -> int:
        return len(self.by_group)

    def label_per_sample(self, n_samples: int) -> list:
        out = [None] * n_samples
        for g, ix in self.by_group.items():
            for i in ix:
                out[i] = g
        if any(l is None for l in out):
            raise DataError("group assignment does not cover all samples")
        return out


def build_group_assignment(emb: EmbeddingSet, min_speakers: int = 100) -> GroupAssignment:
    """Keep labels with >= min_speakers distinct speakers, merge the rest into 'other'."""
    if min_speakers < 1:
        raise DataError("min_speakers must be >= 1")
    if emb.n_samples == 0:
        raise DataError("cannot group an empty embedding set")
    speakers_per_label = {}
    for spk, grp in zip(emb.speakers, emb.groups):
        speakers_per_label.setdefault(grp, set()).add(spk)
    keep = {g for g, spks in speakers_per_label.items() if len(spks) >= min_speakers}
    by_group = {}
    for i, grp in enumerate(emb.groups):
        label = grp if grp in keep else OTHER_GROUP
        by_group.setdefault(label, []).append(i)
    return GroupAssignment({g: np.array(ix, dtype=np.intp) for g, ix in by_group.items()})


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_embeddings_text(emb: EmbeddingSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#dim={emb.dim}\n")
        for i in range(emb.n_samples):
            vec = " ".join(f"{v:.17g}" for v in emb.vectors[i])
            f.write(f"{emb.ids[i]}\t{emb.speakers[i]}\t{emb.groups[i]}\t"
                    f"{emb.durations[i]:.17g}\t{emb.source_files[i]}\t{vec}\n")


def _load_embeddings_text(path) -> EmbeddingSet:
    ids, speakers, groups, durations, files, rows = [], [], [], [], [], []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("#dim="):
            raise DataError(f"{path}: missing '#dim=' header")
        try:
            dim = int(header[5:])
        except ValueError:
            raise DataError(f"{path}: bad dimension in header '{header}'")
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            sid, spk, grp, dur_s, src, vec_s = parts
            try:
                dur = float(dur_s)
                vec = np.array([float(v) for v in vec_s.split()], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number")
            if vec.size != dim:
                raise DataError(f"{path}:{lineno}: {vec.size} vector values, expected {dim}")
            if dur <= 0:
                raise DataError(f"{path}:{lineno}: non-positive duration {dur}")
            ids.append(sid); speakers.append(spk); groups.append(grp)
            durations.append(dur); files.append(src); rows.append(vec)
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"{path}: duplicate sample id '{dup}'")
    vectors = np.vstack(rows) if rows else np.zeros((0, dim))
    return EmbeddingSet(ids, vectors, speakers, groups, np.array(durations), files)


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def save_embeddings_binary(emb: EmbeddingSet, path) -> None:
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<II", emb.n_samples, emb.dim))
        for i in range(emb.n_samples):
            _write_str(f, emb.ids[i])
            _write_str(f, emb.speakers[i])
            _write_str(f, emb.groups[i])
            _write_str(f, emb.source_files[i])
            f.write(struct.pack("<d", emb.durations[i]))
        f.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())


def _load_embeddings_binary(path) -> EmbeddingSet:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != BINARY_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        n, d = struct.unpack("<II", f.read(8))
        ids, speakers, groups, files, durations = [], [], [], [], []
        for _ in range(n):
            ids.append(_read_str(f))
            speakers.append(_read_str(f))
            groups.append(_read_str(f))
            files.append(_read_str(f))
            (dur,) = struct.unpack("<d", f.read(8))
            durations.append(dur)
        buf = f.read(4 * n * d)
        if len(buf) != 4 * n * d:
            raise DataError(f"{path}: truncated vector block")
        vectors = np.frombuffer(buf, dtype="<f4").reshape(n, d).astype(np.float64)
    return EmbeddingSet(ids, vectors, speakers, groups, np.array(durations), files)


def load_embeddings(path) -> EmbeddingSet:
    """Load either format; binary is detected by its magic bytes."""
    with open(path, "rb") as f:
        magic = f.read(5)
    if magic == BINARY_MAGIC:
        return _load_embeddings_binary(path)
    return _load_embeddings_text(path)


def save_trials(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e, t, lab in zip(trials.enroll_ids, trials.test_ids, trials.labels):
            f.write(f"{e}\t{t}\t{TARGET if lab else NONTARGET}\n")


def load_trials(path) -> TrialList:
    enroll, test, labels = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in (TARGET, NONTARGET):
                raise DataError(f"{path}:{lineno}: malformed trial line")
            enroll.append(parts[0]); test.append(parts[1])
            labels.append(parts[2] == TARGET)
    return TrialList(enroll, test, np.array(labels, dtype=bool))


def save_scores(trials: TrialList, scores: ScoreSet, path) -> None:
    if scores.raw.size != trials.n_trials:
        raise DataError("scores not aligned with trials")
    with open(path, "w", encoding="utf-8") as f:
        for i in range(trials.n_trials):
            f.write(f"{trials.enroll_ids[i]}\t{trials.test_ids[i]}\t"
                    f"{scores.raw[i]:.17g}\t{scores.llr[i]:.17g}\n")


def load_scores(path) -> tuple:
    """Returns (TrialList-like id pairs without labels, ScoreSet).

    Labels are not stored in score files; the returned pairs are
    (enroll_ids, test_ids) tuples.
    """
    enroll, test, raw, llr = [], [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: malformed score line")
            enroll.append(parts[0]); test.append(parts[1])
            try:
                raw.append(float(parts[2])); llr.append(float(parts[3]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number")
    return (tuple(enroll), tuple(test)), ScoreSet(np.array(raw), np.array(llr))
