"""Chunk planning and trial-list construction at the metadata level.

Chunks accumulate a target amount of *speech* seconds by walking SAD
speech regions from a start offset; non-speech gaps do not count. Trial
lists pair every chunk against every other chunk, excluding pairs that
come from the same original audio file.

Speech regions input format: TSV ``file_id<TAB>start_s<TAB>end_s``.
Chunk plan output format: TSV ``chunk_id<TAB>file_id<TAB>start_s<TAB>speech_s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet, TrialList
from .errors import DataError


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    start_s: float
    end_s: float
    speech_s: float


@dataclass(frozen=True)
class ChunkPlan:
    """Planned chunks for one original file."""

    file_id: str
    speaker_id: str
    chunks: tuple


def _speech_between(regions, start: float) -> float:
    """Total speech seconds at or after file time ``start``."""
    total = 0.0
    for a, b in regions:
        total += max(0.0, b - max(a, start))
    return total


def _walk_chunk(regions, start: float, target: float):
    """End time of a chunk starting at ``start`` with ``target`` speech seconds."""
    acc = 0.0
    for a, b in regions:
        lo = max(a, start)
        if lo >= b:
            continue
        avail = b - lo
        if acc + avail >= target:
            return lo + (target - acc)
        acc += avail
    raise DataError(f"insufficient speech after offset {start:g}")


def plan_chunks(file_id: str, speaker_id: str, speech_regions, target_speech_s: float,
                n_chunks: int = 4) -> ChunkPlan:
    """Plan ``n_chunks`` chunks of ``target_speech_s`` speech seconds each.

    Start offsets are evenly spaced over the feasible range
    [0, latest start from which the target is still reachable], endpoints
    included. Chunks may overlap. Deterministic.
    """
    regions = sorted((float(a), float(b)) for a, b in speech_regions)
    for (a1, b1), (a2, _) in zip(regions, regions[1:]):
        if a2 < b1:
            raise DataError(f"file '{file_id}': overlapping speech regions")
    if any(b <= a for a, b in regions):
        raise DataError(f"file '{file_id}': empty speech region")
    total = _speech_between(regions, 0.0)
    if total < target_speech_s:
        raise DataError(
            f"file '{file_id}': total speech {total:g}s < target {target_speech_s:g}s")

    # Latest feasible start: binary search on remaining speech, which is
    # non-increasing and piecewise linear in the start offset.
    lo, hi = 0.0, regions[-1][1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _speech_between(regions, mid) >= target_speech_s:
            lo = mid
        else:
            hi = mid
    latest = lo

    if n_chunks == 1:
        starts = [0.0]
    else:
        starts = list(np.linspace(0.0, latest, n_chunks))
    chunks = []
    for k, s in enumerate(starts):
        end = _walk_chunk(regions, s, target_speech_s)
        chunks.append(Chunk(f"{file_id}#c{k}", s, end, target_speech_s))
    return ChunkPlan(file_id, speaker_id, tuple(chunks))


def load_speech_regions(path) -> dict:
    """Read a speech-region TSV into {file_id: [(start_s, end_s), ...]}."""
    regions = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields")
            try:
                start, end = float(parts[1]), float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number")
            regions.setdefault(parts[0], []).append((start, end))
    return regions


def save_chunk_plans(plans, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for plan in plans:
            for c in plan.chunks:
                f.write(f"{c.chunk_id}\t{plan.file_id}\t{c.start_s:.6f}\t{c.speech_s:.6f}\n")


def build_trials(emb: EmbeddingSet, within_groups: bool = False) -> TrialList:
    """All canonical pairs (i < j), excluding pairs sharing a source file.

    Labels come from speaker metadata. Scores downstream are symmetric, so
    unordered pairs suffice. With ``within_groups`` set, pairs spanning two
    group labels are excluded too, matching the per-group evaluation design.
    """
    n = emb.n_samples
    enroll, test, labels = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if emb.source_files[i] == emb.source_files[j]:
                continue
            if within_groups and emb.groups[i] != emb.groups[j]:
                continue
            enroll.append(emb.ids[i])
            test.append(emb.ids[j])
            labels.append(emb.speakers[i] == emb.speakers[j])
    return TrialList(enroll, test, np.array(labels, dtype=bool))


def sample_training_durations(n: int, min_s: float = 4.0, max_s: float = 240.0,
                              seed: int = 0) -> np.ndarray:
    """Durations log-uniform on [min_s, max_s]; deterministic given seed."""
    if min_s <= 0:
        raise DataError("min_s must be positive")
    if min_s > max_s:
        raise DataError("min_s must not exceed max_s")
    if min_s == max_s:
        return np.full(n, float(min_s))
    rng = np.random.default_rng(seed)
    u = rng.uniform(np.log(min_s), np.log(max_s), size=n)
    return np.exp(u)
