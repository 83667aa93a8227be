"""Episodic training with Adam, validation-based model selection and checkpoints.

Checkpoint layout (little-endian)::

    b"SEMC" | version u32 | config length u32 | config JSON (utf-8)
    per parameter, in declaration order: ndim u32 | dims u32... | float64 values
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import Dataset, DatasetManifest, group_by_speaker
from .encoder import PARAM_NAMES, EncoderConfig, EncoderParams, ModelEncoder, embed, init_params
from .evaluation import InsufficientDataError, eval_pool, si_task
from .losses import DistanceKind, Margin, pnl_batch, tl_batch_naive, tl_batch_semihard
from .sampler import EpisodeSpec, count_segments, episode_to_tl_batch, sample_episode

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SEMC"
CHECKPOINT_VERSION = 1


class LossKind(str, Enum):
    PNL = "pnl"
    TL_NAIVE = "tl-naive"
    TL_SEMIHARD = "tl-semi"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ValidationSpec:
    k_way: int = 5
    n_enroll: int = 3
    n_query: int = 5
    repeats: int = 10


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: LossKind = LossKind.PNL
    dist: DistanceKind = DistanceKind.SQEUCLIDEAN
    episode: EpisodeSpec = EpisodeSpec()
    margin: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 100
    episodes_per_epoch: int | None = None
    crop_frames: int = 200
    hidden_dim: int = 16
    embedding_dim: int = 16
    seed: int = 0
    validation: ValidationSpec | None = ValidationSpec()

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "dist", DistanceKind.parse(self.dist))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.episodes_per_epoch is not None and self.episodes_per_epoch < 0:
            raise ValueError("episodes_per_epoch must be >= 0")
        if self.crop_frames < 1:
            raise ValueError("crop_frames must be >= 1")
        Margin(self.margin)

    @property
    def label(self) -> str:
        dist = "Euc" if self.dist is DistanceKind.SQEUCLIDEAN else "Cos"
        if self.loss_kind is LossKind.PNL:
            return f"PNL ({self.episode.n_shot}_{self.episode.n_query}, {dist})"
        mining = "Naive" if self.loss_kind is LossKind.TL_NAIVE else "Semi"
        return f"TL ({mining}, {dist})"

    def to_json(self) -> dict:
        out = asdict(self)
        out["loss_kind"] = self.loss_kind.value
        out["dist"] = self.dist.value
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        obj = dict(obj)
        obj["episode"] = EpisodeSpec(**obj["episode"])
        if obj.get("validation") is not None:
            obj["validation"] = ValidationSpec(**obj["validation"])
        return cls(**obj)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float = 1e-3):
    """One bias-corrected Adam update; returns new (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step, b1, b2, state.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    final_params: EncoderParams | None = None


def episode_loss(leaves, episode, config: TrainConfig) -> T.Tensor:
    if config.loss_kind is LossKind.PNL:
        n_support = len(episode.support)
        emb = embed(leaves, list(episode.support) + list(episode.query))
        support = T.slice_axis(emb, 0, n_support, axis=0)
        query = T.slice_axis(emb, n_support, emb.shape[0], axis=0)
        return pnl_batch(support, episode.support_labels, query, episode.query_labels, config.dist)
    seqs, labels = episode_to_tl_batch(episode)
    emb = embed(leaves, seqs)
    if config.loss_kind is LossKind.TL_NAIVE:
        return tl_batch_naive(emb, labels, Margin(config.margin), config.dist)
    return tl_batch_semihard(emb, labels, Margin(config.margin), config.dist)


def default_episodes_per_epoch(train_seqs, config: TrainConfig) -> int:
    """Roughly one pass over the training segments per epoch."""
    return max(1, math.ceil(count_segments(train_seqs, config.crop_frames) / config.episode.batch_size))


def train(dataset: Dataset, manifest: DatasetManifest, config: TrainConfig) -> TrainResult:
    train_seqs = manifest.select(dataset, "train")
    pool = group_by_speaker(train_seqs)
    enc_cfg = EncoderConfig(dataset.feature_dim, config.hidden_dim, config.embedding_dim, config.seed)
    params = init_params(enc_cfg)
    state = AdamState.zeros_like(params.arrays)
    rng = np.random.default_rng([config.seed, 0])
    n_episodes = config.episodes_per_epoch
    if n_episodes is None:
        n_episodes = default_episodes_per_epoch(train_seqs, config)

    val_pool = None
    if config.validation is not None:
        val_pool = eval_pool(dataset, manifest, "validation", config.crop_frames)

    history: list[EpochRecord] = []
    best_params, best_metric, best_epoch = params, -np.inf, 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for e in range(n_episodes):
            episode = sample_episode(pool, config.episode, rng, config.crop_frames)
            leaves = params.leaves()
            loss = episode_loss(leaves, episode, config)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, episode {e}")
            T.backward(loss)
            grads = {k: leaves[k].grad for k in PARAM_NAMES}
            new_arrays, state = adam_step(params.arrays, grads, state, config.learning_rate)
            params = params.replace(new_arrays)
            losses.append(loss.item())
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_metric = _validate(params, val_pool, config)
        history.append(EpochRecord(epoch, train_loss, val_metric))
        log.info("epoch %d loss %.5f val %.4f", epoch, train_loss, val_metric)
        if val_pool is None or best_epoch == 0 or (not np.isnan(val_metric) and val_metric > best_metric):
            best_params, best_epoch = params, epoch
            if not np.isnan(val_metric):
                best_metric = val_metric
    return TrainResult(best_params, history, best_epoch, params)


def _validate(params: EncoderParams, val_pool, config: TrainConfig) -> float:
    if val_pool is None or config.validation is None:
        return float("nan")
    v = config.validation
    try:
        report = si_task(
            val_pool,
            v.k_way,
            v.n_enroll,
            v.n_query,
            ModelEncoder(params),
            config.dist,
            v.repeats,
            np.random.default_rng([config.seed, 1]),
        )
    except InsufficientDataError as exc:
        log.warning("validation skipped: %s", exc)
        return float("nan")
    return report.mean


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_metric"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_metric)])


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [EpochRecord(int(r[0]), float(r[1]), float(r[2])) for r in rows]


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_save(params: EncoderParams, config: TrainConfig | None, path) -> None:
    payload = json.dumps(
        {"encoder": asdict(params.config), "train": config.to_json() if config is not None else None},
        sort_keys=True,
    ).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(payload)), payload]
    for name in PARAM_NAMES:
        arr = params.arrays[name]
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def checkpoint_load(path) -> tuple[EncoderParams, TrainConfig | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, length = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    if offset + length > len(raw):
        raise CheckpointError(f"{path}: truncated config payload")
    try:
        meta = json.loads(raw[offset : offset + length].decode("utf-8"))
        enc_cfg = EncoderConfig(**meta["encoder"])
        train_cfg = TrainConfig.from_json(meta["train"]) if meta.get("train") is not None else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt config payload: {exc}") from None
    offset += length
    arrays = {}
    shapes = enc_cfg.param_shapes()
    try:
        for name in PARAM_NAMES:
            (ndim,) = struct.unpack_from("<I", raw, offset)
            dims = struct.unpack_from(f"<{ndim}I", raw, offset + 4)
            offset += 4 + 4 * ndim
            if tuple(dims) != shapes[name]:
                raise CheckpointError(f"{path}: {name} has shape {dims}, expected {shapes[name]}")
            count = int(np.prod(dims))
            if offset + 8 * count > len(raw):
                raise CheckpointError(f"{path}: truncated parameter {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * count
    except struct.error:
        raise CheckpointError(f"{path}: truncated parameter table") from None
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return EncoderParams(enc_cfg, arrays), train_cfg


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
