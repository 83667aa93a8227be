"""Episode sampling for prototypical training and flat batches for triplets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import group_by_speaker
from .encoder import FeatureSequence


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    k_way: int = 15
    n_shot: int = 3
    n_query: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_way < 2:
            raise ValueError(f"k_way must be >= 2, got {self.k_way}")
        if self.n_shot < 1 or self.n_query < 1:
            raise ValueError(f"n_shot and n_query must be >= 1, got {self.n_shot}, {self.n_query}")

    @property
    def per_speaker(self) -> int:
        return self.n_shot + self.n_query

    @property
    def batch_size(self) -> int:
        return self.k_way * self.per_speaker


@dataclass
class Episode:
    support: list[FeatureSequence]
    query: list[FeatureSequence]

    @property
    def support_labels(self) -> list[int]:
        return [s.speaker_id for s in self.support]

    @property
    def query_labels(self) -> list[int]:
        return [s.speaker_id for s in self.query]

    @property
    def speakers(self) -> list[int]:
        return sorted(set(self.support_labels))


def crop_segment(seq: FeatureSequence, frames: int, rng: np.random.Generator) -> FeatureSequence:
    """A contiguous window of exactly ``frames`` rows at a uniform random offset."""
    if frames < 1:
        raise ValueError("crop length must be >= 1")
    if len(seq) < frames:
        raise SamplingError(f"sequence of {len(seq)} frames is shorter than crop window {frames}")
    start = int(rng.integers(0, len(seq) - frames + 1))
    return FeatureSequence(seq.frames[start : start + frames], seq.speaker_id, seq.source_id)


def _pool(dataset, crop_frames: int | None) -> dict[int, list[FeatureSequence]]:
    if isinstance(dataset, Mapping):
        pool = {int(k): list(v) for k, v in dataset.items()}
    else:
        pool = group_by_speaker(getattr(dataset, "utterances", dataset))
    if crop_frames is not None:
        pool = {k: [s for s in v if len(s) >= crop_frames] for k, v in pool.items()}
    return {k: v for k, v in sorted(pool.items()) if v}


def sample_episode(
    dataset,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    crop_frames: int | None = None,
) -> Episode:
    """Draw ``k_way`` speakers and ``n_shot + n_query`` utterances of each.

    ``dataset`` is a :class:`~semb.data.Dataset`, a list of sequences, or a
    mapping speaker -> sequences.  With ``crop_frames`` every chosen utterance
    is cropped to a fresh random window; shorter utterances are never drawn.
    """
    pool = _pool(dataset, crop_frames)
    eligible = [k for k, v in pool.items() if len(v) >= spec.per_speaker]
    if len(eligible) < spec.k_way:
        raise SamplingError(
            f"need {spec.k_way} speakers with >= {spec.per_speaker} utterances, only {len(eligible)} available"
        )
    speakers = rng.choice(np.asarray(eligible), size=spec.k_way, replace=False)
    support, query = [], []
    for s in speakers.tolist():
        utts = pool[s]
        picks = rng.choice(len(utts), size=spec.per_speaker, replace=False)
        chosen = [utts[i] for i in picks]
        if crop_frames is not None:
            chosen = [crop_segment(u, crop_frames, rng) for u in chosen]
        support.extend(chosen[: spec.n_shot])
        query.extend(chosen[spec.n_shot :])
    return Episode(support, query)


def episode_to_tl_batch(ep: Episode) -> tuple[list[FeatureSequence], list[int]]:
    """Support followed by query as one labeled batch of the same total size."""
    seqs = list(ep.support) + list(ep.query)
    return seqs, [s.speaker_id for s in seqs]


def count_segments(seqs: Sequence[FeatureSequence], frames: int) -> int:
    return int(sum(len(s) // frames for s in seqs))
