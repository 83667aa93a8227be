"""Evaluation protocols: same/different ROC, K-way identification, verification EER.

Scores are distances throughout: a smaller score means "same speaker".
An *encoder* is any callable mapping a list of sequences to an (n, M)
embedding matrix.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset, DatasetManifest, group_by_speaker, segment
from .encoder import FeatureSequence
from .losses import DistanceKind, Prototype, distance_matrix

Encoder = Callable[[Sequence[FeatureSequence]], np.ndarray]


class InsufficientDataError(ValueError):
    pass


@dataclass
class TrialSet:
    scores: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.same = np.asarray(self.same, dtype=bool).ravel()
        if self.scores.shape != self.same.shape:
            raise ValueError("scores and labels differ in length")

    @property
    def n_positive(self) -> int:
        return int(self.same.sum())

    @property
    def n_negative(self) -> int:
        return int((~self.same).sum())

    def __len__(self):
        return self.scores.size

    def concat(self, other: "TrialSet") -> "TrialSet":
        return TrialSet(np.concatenate([self.scores, other.scores]), np.concatenate([self.same, other.same]))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class EvalReport:
    task: dict
    metric: str
    mean: float
    std: float
    values: list[float]
    repeats: int
    draws_hash: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, task: dict, metric: str, values, draws_hash: str = "", **extra) -> "EvalReport":
        values = [float(v) for v in values]
        arr = np.asarray(values)
        return cls(task, metric, float(arr.mean()), float(arr.std()), values, len(values), draws_hash, extra)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        return cls(**dict(obj))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "metric", "mean", "std", "values", "repeats", "draws_hash"],
    "properties": {
        "task": {"type": "object"},
        "metric": {"type": "string", "enum": ["accuracy", "eer", "auc"]},
        "mean": {"type": "number"},
        "std": {"type": "number", "minimum": 0},
        "values": {"type": "array", "items": {"type": "number"}},
        "repeats": {"type": "integer", "minimum": 1},
        "draws_hash": {"type": "string"},
        "extra": {"type": "object"},
    },
}


# --------------------------------------------------------------------------
# data plumbing


def eval_pool(dataset: Dataset, manifest: DatasetManifest, split: str, segment_frames: int) -> dict[int, list[FeatureSequence]]:
    """Fixed, non-overlapping segments of every utterance in ``split``."""
    return group_by_speaker(segment(manifest.select(dataset, split), segment_frames))


def embed_pool(pool: Mapping[int, Sequence[FeatureSequence]], encoder: Encoder) -> dict[int, np.ndarray]:
    speakers = sorted(pool)
    flat = [s for k in speakers for s in pool[k]]
    if not flat:
        raise InsufficientDataError("evaluation pool is empty")
    emb = np.asarray(encoder(flat), dtype=np.float64)
    out, start = {}, 0
    for k in speakers:
        out[k] = emb[start : start + len(pool[k])]
        start += len(pool[k])
    return out


def _as_embeddings(pool, encoder) -> dict[int, np.ndarray]:
    return embed_pool(pool, encoder) if encoder is not None else {int(k): np.asarray(v) for k, v in pool.items()}


class _DrawLog:
    def __init__(self):
        self._h = hashlib.sha256()

    def add(self, *arrays) -> None:
        for a in arrays:
            self._h.update(np.asarray(a, dtype=np.int64).tobytes())

    def hexdigest(self) -> str:
        return self._h.hexdigest()[:16]


def _distances(queries: np.ndarray, refs: np.ndarray, dist: DistanceKind) -> np.ndarray:
    return distance_matrix(np.atleast_2d(queries), np.atleast_2d(refs), dist).data


# --------------------------------------------------------------------------
# metrics


def _check_both_classes(trials: TrialSet) -> None:
    if trials.n_positive == 0 or trials.n_negative == 0:
        raise ValueError("trials must contain both same- and different-speaker pairs")


def roc(trials: TrialSet) -> RocCurve:
    """Sweep the distance threshold over every distinct score.

    A trial is predicted "same" when its score is <= the threshold.  The
    first point is (-inf, 0, 0); the last threshold yields (1, 1).
    """
    _check_both_classes(trials)
    order = np.argsort(trials.scores, kind="mergesort")
    scores = trials.scores[order]
    same = trials.same[order]
    tp = np.cumsum(same)
    fp = np.cumsum(~same)
    # last position of each distinct score
    last = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    thresholds = np.r_[-np.inf, scores[last]]
    tpr = np.r_[0.0, tp[last] / trials.n_positive]
    fpr = np.r_[0.0, fp[last] / trials.n_negative]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def eer(trials: TrialSet) -> float:
    """Equal error rate, linearly interpolated at the FAR/FRR crossing."""
    curve = roc(trials)
    far = curve.fpr
    frr = 1.0 - curve.tpr
    gap = far - frr
    k = int(np.argmax(gap >= 0))
    if gap[k] == 0 or k == 0:
        return float(far[k])
    w = gap[k - 1] / (gap[k - 1] - gap[k])
    return float(far[k - 1] + w * (far[k] - far[k - 1]))


def identify(query_embedding, prototypes: Sequence[Prototype], dist=DistanceKind.SQEUCLIDEAN) -> int:
    """Speaker of the nearest prototype; ties go to the lowest speaker id."""
    if not prototypes:
        raise ValueError("identify needs at least one prototype")
    protos = sorted(prototypes, key=lambda p: p.speaker_id)
    d = _distances(np.asarray(query_embedding), np.stack([p.center for p in protos]), DistanceKind.parse(dist))[0]
    return protos[int(np.argmin(d))].speaker_id


# --------------------------------------------------------------------------
# protocols


def same_different_trials(
    pool: Mapping[int, Sequence[FeatureSequence]],
    n_pairs: int,
    encoder: Encoder | None,
    dist=DistanceKind.SQEUCLIDEAN,
    rng: np.random.Generator | None = None,
) -> TrialSet:
    """``n_pairs`` same-speaker and ``n_pairs`` different-speaker segment pairs.

    Same pairs: a speaker (with >= 2 segments) uniformly, then two distinct
    segments.  Different pairs: two distinct speakers, one segment each.
    ``encoder=None`` means ``pool`` already holds embedding matrices.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = DistanceKind.parse(dist)
    emb = _as_embeddings(pool, encoder)
    speakers = sorted(emb)
    multi = [k for k in speakers if len(emb[k]) >= 2]
    if len(speakers) < 2 or not multi:
        raise InsufficientDataError("same/different trials need >= 2 speakers and one with >= 2 segments")
    scores, same = [], []
    for _ in range(n_pairs):
        k = multi[int(rng.integers(len(multi)))]
        i, j = rng.choice(len(emb[k]), size=2, replace=False)
        scores.append(_distances(emb[k][i], emb[k][j], dist)[0, 0])
        same.append(True)
    for _ in range(n_pairs):
        a, b = rng.choice(len(speakers), size=2, replace=False)
        ka, kb = speakers[a], speakers[b]
        i, j = int(rng.integers(len(emb[ka]))), int(rng.integers(len(emb[kb])))
        scores.append(_distances(emb[ka][i], emb[kb][j], dist)[0, 0])
        same.append(False)
    return TrialSet(np.asarray(scores), np.asarray(same))


def same_different(pool, n_pairs, encoder, dist=DistanceKind.SQEUCLIDEAN, repeats=1, rng=None, split=""):
    """AUC of the same/different experiment; returns (report, per-repeat curves)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    emb = _as_embeddings(pool, encoder)
    curves, aucs = [], []
    for _ in range(repeats):
        curve = roc(same_different_trials(emb, n_pairs, None, dist, rng))
        curves.append(curve)
        aucs.append(curve.auc)
    task = {"protocol": "samediff", "split": split, "n_pairs": n_pairs, "dist": DistanceKind.parse(dist).value}
    return EvalReport.from_values(task, "auc", aucs), curves


def si_task(
    pool: Mapping[int, Sequence[FeatureSequence]],
    k_way: int,
    n_enroll: int,
    n_query: int,
    encoder: Encoder | None,
    dist=DistanceKind.SQEUCLIDEAN,
    repeats: int = 10,
    rng: np.random.Generator | None = None,
    split: str = "",
) -> EvalReport:
    """K-way identification against prototypes of ``n_enroll`` segments."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = DistanceKind.parse(dist)
    emb = _as_embeddings(pool, encoder)
    need = n_enroll + n_query
    eligible = [k for k in sorted(emb) if len(emb[k]) >= need]
    if k_way < 1 or n_enroll < 1 or n_query < 1:
        raise ValueError("k_way, n_enroll and n_query must be >= 1")
    if len(eligible) < k_way:
        raise InsufficientDataError(f"{k_way}-way task needs {k_way} speakers with >= {need} segments, found {len(eligible)}")
    log = _DrawLog()
    accuracies = []
    for _ in range(repeats):
        speakers = np.sort(rng.choice(np.asarray(eligible), size=k_way, replace=False))
        protos, queries = [], []
        for k in speakers.tolist():
            picks = rng.choice(len(emb[k]), size=need, replace=False)
            log.add([k], picks)
            protos.append(emb[k][picks[:n_enroll]].mean(axis=0))
            queries.append(emb[k][picks[n_enroll:]])
        d = _distances(np.concatenate(queries), np.stack(protos), dist)
        predicted = np.argmin(d, axis=1)  # first minimum = lowest speaker id
        truth = np.repeat(np.arange(k_way), n_query)
        accuracies.append(float(np.mean(predicted == truth)))
    task = {"protocol": "si", "split": split, "k_way": k_way, "n_enroll": n_enroll, "n_query": n_query, "dist": dist.value}
    return EvalReport.from_values(task, "accuracy", accuracies, log.hexdigest())


def enrollment_segments(enroll_duration_frames: int, segment_frames: int) -> int:
    """Number of fixed-length segments covering the enrollment duration."""
    if enroll_duration_frames < 1 or segment_frames < 1:
        raise ValueError("durations must be positive")
    return int(math.ceil(enroll_duration_frames / segment_frames))


def sv_trials(
    emb: Mapping[int, np.ndarray],
    n_enroll: int,
    n_pos: int,
    n_neg: int,
    dist: DistanceKind,
    rng: np.random.Generator,
    log: _DrawLog | None = None,
) -> TrialSet:
    speakers = sorted(emb)
    eligible = [k for k in speakers if len(emb[k]) >= n_enroll + n_pos]
    if not eligible or len(speakers) < 2:
        raise InsufficientDataError(f"verification needs >= 2 speakers and one with >= {n_enroll + n_pos} segments")
    scores, same = [], []
    for k in eligible:
        picks = rng.choice(len(emb[k]), size=n_enroll + n_pos, replace=False)
        prototype = emb[k][picks[:n_enroll]].mean(axis=0)
        others = [(o, i) for o in speakers if o != k for i in range(len(emb[o]))]
        neg_idx = rng.choice(len(others), size=n_neg, replace=len(others) < n_neg)
        negatives = np.stack([emb[others[j][0]][others[j][1]] for j in neg_idx])
        if log is not None:
            log.add([k], picks, neg_idx)
        scores.append(_distances(emb[k][picks[n_enroll:]], prototype, dist)[:, 0])
        same.append(np.ones(n_pos, dtype=bool))
        scores.append(_distances(negatives, prototype, dist)[:, 0])
        same.append(np.zeros(n_neg, dtype=bool))
    return TrialSet(np.concatenate(scores), np.concatenate(same))


def sv_task(
    pool: Mapping[int, Sequence[FeatureSequence]],
    enroll_duration_frames: int,
    segment_frames: int,
    n_pos: int,
    n_neg: int | None,
    encoder: Encoder | None,
    dist=DistanceKind.SQEUCLIDEAN,
    repeats: int = 10,
    rng: np.random.Generator | None = None,
    split: str = "",
):
    """Verification EER; returns (report, per-repeat trial sets).

    Every eligible speaker is enrolled from segments totalling the requested
    duration, then scored against ``n_pos`` of its own held-out segments and
    ``n_neg`` (default ``n_pos``) segments of other speakers.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = DistanceKind.parse(dist)
    n_neg = n_pos if n_neg is None else n_neg
    emb = _as_embeddings(pool, encoder)
    n_enroll = enrollment_segments(enroll_duration_frames, segment_frames)
    log = _DrawLog()
    trial_sets = [sv_trials(emb, n_enroll, n_pos, n_neg, dist, rng, log) for _ in range(repeats)]
    task = {
        "protocol": "sv",
        "split": split,
        "enroll_frames": enroll_duration_frames,
        "segment_frames": segment_frames,
        "n_enroll": n_enroll,
        "n_pos": n_pos,
        "n_neg": n_neg,
        "dist": dist.value,
    }
    return EvalReport.from_values(task, "eer", [eer(t) for t in trial_sets], log.hexdigest()), trial_sets


# --------------------------------------------------------------------------
# export


def write_roc_csv(path, curves: Sequence[RocCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["repeat", "threshold", "fpr", "tpr"])
        for r, curve in enumerate(curves):
            for t, f, p in curve.points():
                w.writerow([r, repr(t), repr(f), repr(p)])


def write_repeats_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["repeat", report.metric])
        for r, v in enumerate(report.values):
            w.writerow([r, repr(v)])


def read_roc_csv(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]
