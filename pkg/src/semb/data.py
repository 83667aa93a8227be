"""Synthetic speaker corpora, feature files and seen/unseen splits.

Binary feature file (little-endian)::

    b"SEQF" | version u32 = 1 | feature_dim u32 | utterance_count u32
    per utterance: speaker_id u32 | frame_count u32 | frame_count*feature_dim f32

A manifest JSON sits next to it::

    {"feature_dim": d, "speakers": [{"id": s, "split": "train", "utterances": [...]}, ...]}

A seen speaker has one entry per split it contributes to (train, validation,
test); an unseen speaker has a single "unseen" entry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import FeatureSequence

MAGIC = b"SEQF"
VERSION = 1
SPLITS = ("train", "validation", "test", "unseen")

_HEADER = struct.Struct("<4sIII")
_UTT = struct.Struct("<II")


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class BadMagicError(FeatureFileError):
    pass


class UnsupportedVersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class FeatureDimError(FeatureFileError):
    pass


@dataclass
class Dataset:
    feature_dim: int
    utterances: list[FeatureSequence]

    def __len__(self):
        return len(self.utterances)

    @property
    def speakers(self) -> list[int]:
        return sorted({u.speaker_id for u in self.utterances})


@dataclass
class SpeakerEntry:
    id: int
    split: str
    utterances: list[int]


@dataclass
class DatasetManifest:
    feature_dim: int
    speakers: list[SpeakerEntry] = field(default_factory=list)

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return sorted(i for e in self.speakers if e.split == split for i in e.utterances)

    def speaker_ids(self, split: str) -> list[int]:
        return sorted({e.id for e in self.speakers if e.split == split and e.utterances})

    def select(self, dataset: Dataset, split: str) -> list[FeatureSequence]:
        return [dataset.utterances[i] for i in self.indices(split)]

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "speakers": [{"id": e.id, "split": e.split, "utterances": list(e.utterances)} for e in self.speakers],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        entries = [SpeakerEntry(int(s["id"]), str(s["split"]), [int(i) for i in s["utterances"]]) for s in obj["speakers"]]
        for e in entries:
            if e.split not in SPLITS:
                raise ValueError(f"manifest: unknown split {e.split!r} for speaker {e.id}")
        return cls(int(obj["feature_dim"]), entries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def default_manifest(dataset: Dataset) -> DatasetManifest:
    """Every utterance in the training split."""
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(dataset.utterances):
        by_speaker.setdefault(u.speaker_id, []).append(i)
    return DatasetManifest(dataset.feature_dim, [SpeakerEntry(s, "train", idx) for s, idx in sorted(by_speaker.items())])


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpeakerModel:
    speaker_id: int
    base_vector: np.ndarray
    dynamics: np.ndarray
    noise_scale: float
    seed: int

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        radius = np.max(np.abs(np.linalg.eigvals(self.dynamics)))
        if radius >= 1.0:
            raise ValueError(f"dynamics spectral radius {radius:.4f} must be < 1")

    def utterance(self, frames: int, rng: np.random.Generator) -> np.ndarray:
        dim = self.base_vector.size
        state = np.zeros(dim)
        innovations = rng.standard_normal((frames, dim)) * self.noise_scale
        observation = rng.standard_normal((frames, dim)) * self.noise_scale * OBSERVATION_GAIN
        out = np.empty((frames, dim))
        for t in range(frames):
            state = self.dynamics @ state + innovations[t]
            out[t] = self.base_vector + state + observation[t]
        return out


# tuned so that difficulty 0.5 leaves raw-feature identification imperfect
NOISE_GAIN = 4.0
OBSERVATION_GAIN = 1.0
SPECTRAL_RADIUS = 0.9
# speaker offsets live in a shared low-rank subspace of the feature space
SPEAKER_RANK = 6


def _random_dynamics(dim: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    radius = np.max(np.abs(np.linalg.eigvals(a)))
    return a * (SPECTRAL_RADIUS / radius)


def speaker_models(n_speakers: int, feature_dim: int, difficulty: float, seed: int) -> list[SyntheticSpeakerModel]:
    root = np.random.SeedSequence(seed)
    shared, *children = root.spawn(n_speakers + 1)
    rank = min(SPEAKER_RANK, feature_dim)
    basis, _ = np.linalg.qr(np.random.default_rng(shared).standard_normal((feature_dim, rank)))
    spread = np.sqrt(feature_dim / rank)
    models = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        base = basis @ (rng.standard_normal(rank) * spread)
        dynamics = _random_dynamics(feature_dim, rng)
        models.append(SyntheticSpeakerModel(k, base, dynamics, difficulty * NOISE_GAIN, int(rng.integers(2**63))))
    return models


def generate_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    frames_per_utterance: int,
    feature_dim: int,
    difficulty: float = 0.5,
    seed: int = 0,
) -> tuple[Dataset, DatasetManifest]:
    """Each speaker is a stable linear dynamical system around its own offset.

    ``difficulty`` scales both the driving and the observation noise; values
    are rounded to float32 so the corpus survives a feature-file round trip.
    """
    for name, value in (
        ("n_speakers", n_speakers),
        ("utterances_per_speaker", utterances_per_speaker),
        ("frames_per_utterance", frames_per_utterance),
        ("feature_dim", feature_dim),
    ):
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if not 0.0 < difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in (0, 1], got {difficulty}")
    utterances = []
    for model in speaker_models(n_speakers, feature_dim, difficulty, seed):
        rng = np.random.default_rng(model.seed)
        for u in range(utterances_per_speaker):
            frames = model.utterance(frames_per_utterance, rng).astype(np.float32).astype(np.float64)
            utterances.append(FeatureSequence(frames, model.speaker_id, len(utterances)))
    dataset = Dataset(feature_dim, utterances)
    return dataset, default_manifest(dataset)


# --------------------------------------------------------------------------
# splits


def split_speakers(
    manifest: DatasetManifest,
    n_unseen: int,
    seed: int = 0,
    validation_fraction: float = 0.2,
    test_fraction: float = 0.2,
) -> DatasetManifest:
    """Hold out ``n_unseen`` whole speakers; split the rest by utterance."""
    by_speaker: dict[int, list[int]] = {}
    for e in manifest.speakers:
        by_speaker.setdefault(e.id, []).extend(e.utterances)
    speakers = sorted(by_speaker)
    if n_unseen < 0 or n_unseen >= len(speakers) - 2:
        raise ValueError(f"cannot hold out {n_unseen} of {len(speakers)} speakers (need n_unseen < {len(speakers) - 2})")
    if validation_fraction < 0 or test_fraction < 0 or validation_fraction + test_fraction >= 1:
        raise ValueError("validation and test fractions must be non-negative and sum below 1")
    rng = np.random.default_rng(seed)
    unseen = set(rng.permutation(speakers)[:n_unseen].tolist())
    entries = []
    for s in speakers:
        utts = sorted(by_speaker[s])
        if s in unseen:
            entries.append(SpeakerEntry(s, "unseen", utts))
            continue
        order = rng.permutation(utts).tolist()
        n_val = int(round(validation_fraction * len(order)))
        n_test = int(round(test_fraction * len(order)))
        val, test, train = order[:n_val], order[n_val : n_val + n_test], order[n_val + n_test :]
        for split, part in (("train", train), ("validation", val), ("test", test)):
            if part:
                entries.append(SpeakerEntry(s, split, sorted(part)))
    return DatasetManifest(manifest.feature_dim, entries)


# --------------------------------------------------------------------------
# feature files


def write_features(path, dataset: Dataset) -> None:
    chunks = [_HEADER.pack(MAGIC, VERSION, dataset.feature_dim, len(dataset.utterances))]
    for u in dataset.utterances:
        if u.dim != dataset.feature_dim:
            raise FeatureDimError(f"utterance {u.source_id} has dim {u.dim}, dataset dim {dataset.feature_dim}")
        chunks.append(_UTT.pack(u.speaker_id, len(u)))
        chunks.append(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path, expected_dim: int | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{path}: not a SEQF feature file")
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise FeatureDimError(f"{path}: feature_dim must be >= 1, got {dim}")
    if expected_dim is not None and dim != expected_dim:
        raise FeatureDimError(f"{path}: feature_dim {dim} does not match expected {expected_dim}")
    offset = _HEADER.size
    raw_ids, frames_list = [], []
    for k in range(count):
        if offset + _UTT.size > len(raw):
            raise TruncatedFileError(f"{path}: utterance {k} header truncated")
        speaker, frames = _UTT.unpack_from(raw, offset)
        offset += _UTT.size
        nbytes = frames * dim * 4
        if offset + nbytes > len(raw):
            raise TruncatedFileError(f"{path}: utterance {k} data truncated")
        if frames < 1:
            raise FeatureFileError(f"{path}: utterance {k} has no frames")
        values = np.frombuffer(raw, dtype="<f4", count=frames * dim, offset=offset)
        offset += nbytes
        raw_ids.append(speaker)
        frames_list.append(values.reshape(frames, dim).astype(np.float64))
    if offset != len(raw):
        raise FeatureFileError(f"{path}: {len(raw) - offset} trailing bytes")
    dense = {s: k for k, s in enumerate(sorted(set(raw_ids)))}
    utterances = [FeatureSequence(f, dense[s], i) for i, (s, f) in enumerate(zip(raw_ids, frames_list))]
    return Dataset(dim, utterances)


def load_features(path, manifest_path=None, expected_dim: int | None = None) -> tuple[Dataset, DatasetManifest]:
    """Load a feature file and its manifest (``<path>.json`` or ``manifest.json`` beside it)."""
    path = Path(path)
    dataset = read_features(path, expected_dim)
    if manifest_path is None:
        for candidate in (path.with_suffix(".json"), path.parent / "manifest.json"):
            if candidate.exists():
                manifest_path = candidate
                break
    if manifest_path is None:
        return dataset, default_manifest(dataset)
    manifest = DatasetManifest.load(manifest_path)
    if manifest.feature_dim != dataset.feature_dim:
        raise FeatureDimError(f"manifest feature_dim {manifest.feature_dim} != file feature_dim {dataset.feature_dim}")
    n = len(dataset)
    bad = [i for e in manifest.speakers for i in e.utterances if not 0 <= i < n]
    if bad:
        raise ValueError(f"manifest references utterances outside the file: {bad[:5]}")
    return dataset, manifest


def save_corpus(directory, dataset: Dataset, manifest: DatasetManifest) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feats, man = directory / "corpus.seqf", directory / "manifest.json"
    write_features(feats, dataset)
    manifest.save(man)
    return feats, man


def group_by_speaker(seqs: Iterable[FeatureSequence]) -> dict[int, list[FeatureSequence]]:
    out: dict[int, list[FeatureSequence]] = {}
    for s in seqs:
        out.setdefault(s.speaker_id, []).append(s)
    return dict(sorted(out.items()))


def segment(seqs: Sequence[FeatureSequence], frames: int) -> list[FeatureSequence]:
    """Cut each sequence into consecutive non-overlapping windows of ``frames``.

    Trailing frames that do not fill a window are dropped; sequences shorter
    than one window contribute nothing.
    """
    if frames < 1:
        raise ValueError("segment length must be >= 1")
    out = []
    for s in seqs:
        for k in range(len(s) // frames):
            out.append(FeatureSequence(s.frames[k * frames : (k + 1) * frames], s.speaker_id, (s.source_id, k)))
    return out
