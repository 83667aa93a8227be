"""Bidirectional LSTM sequence encoder.

frames -> forward/backward LSTM -> mean of hidden states over time per
direction -> concat -> fully connected + tanh -> L2 normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# (input, forget, output, cell) blocks inside the fused gate matrices
GATES = ("input", "forget", "output", "cell")

PARAM_NAMES = (
    "fwd_w_x",
    "fwd_w_h",
    "fwd_b",
    "bwd_w_x",
    "bwd_w_h",
    "bwd_b",
    "fc_w",
    "fc_b",
)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 59
    hidden_dim: int = 16
    embedding_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embedding_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, m = self.input_dim, self.hidden_dim, self.embedding_dim
        shapes = {}
        for prefix in ("fwd", "bwd"):
            shapes[f"{prefix}_w_x"] = (d, 4 * h)
            shapes[f"{prefix}_w_h"] = (h, 4 * h)
            shapes[f"{prefix}_b"] = (4 * h,)
        shapes["fc_w"] = (2 * h, m)
        shapes["fc_b"] = (m,)
        return shapes


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    speaker_id: int
    source_id: int | str | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise T.DomainError(f"a feature sequence needs shape (T>=1, dim), got {frames.shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if list(self.arrays) != list(PARAM_NAMES):
            raise ValueError(f"expected parameters {PARAM_NAMES}, got {tuple(self.arrays)}")
        for name, arr in self.arrays.items():
            if arr.shape != shapes[name]:
                raise T.ShapeError(f"{name}: expected shape {shapes[name]}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaf tensors over copies of the arrays."""
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(self.config, {k: np.asarray(arrays[k], dtype=np.float64) for k in PARAM_NAMES})

    def num_values(self) -> int:
        return int(np.sum([a.size for a in self.arrays.values()]))


def init_params(cfg: EncoderConfig) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias 1."""
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_dim
    arrays: dict[str, np.ndarray] = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith("_b"):
            b = np.zeros(shape)
            if name != "fc_b":
                b[h : 2 * h] = 1.0
            arrays[name] = b
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(cfg, arrays)


def swap_directions(params: EncoderParams) -> EncoderParams:
    """Exchange forward and backward LSTMs (and the matching FC input rows)."""
    a = params.arrays
    h = params.config.hidden_dim
    fc_w = np.concatenate([a["fc_w"][h:], a["fc_w"][:h]], axis=0)
    return params.replace(
        {
            "fwd_w_x": a["bwd_w_x"],
            "fwd_w_h": a["bwd_w_h"],
            "fwd_b": a["bwd_b"],
            "bwd_w_x": a["fwd_w_x"],
            "bwd_w_h": a["fwd_w_h"],
            "bwd_b": a["fwd_b"],
            "fc_w": fc_w,
            "fc_b": a["fc_b"],
        }
    )


def _cell(z: Tensor, w_h: Tensor, h_prev: Tensor | None, c_prev: Tensor | None):
    hidden = w_h.shape[0]
    if h_prev is not None:
        z = T.add(z, T.matmul(h_prev, w_h))
    i = T.sigmoid(T.slice_axis(z, 0, hidden))
    f = T.sigmoid(T.slice_axis(z, hidden, 2 * hidden))
    o = T.sigmoid(T.slice_axis(z, 2 * hidden, 3 * hidden))
    g = T.tanh(T.slice_axis(z, 3 * hidden, 4 * hidden))
    c = T.mul(i, g)
    if c_prev is not None:
        c = T.add(T.mul(f, c_prev), c)
    h = T.mul(o, T.tanh(c))
    return h, c


def lstm_step(params, direction: str, x_t, h_prev, c_prev):
    """One LSTM update for ``direction`` in {"fwd", "bwd"}.

    ``params`` is either :class:`EncoderParams` or a mapping of tensors.
    ``x_t`` may be a single frame (input_dim,) or a batch of rows.
    """
    leaves = params.constants() if isinstance(params, EncoderParams) else params
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    w_x, w_h, b = (leaves[f"{direction}_{s}"] for s in ("w_x", "w_h", "b"))
    x_t, h_prev, c_prev = T.as_tensor(x_t), T.as_tensor(h_prev), T.as_tensor(c_prev)
    single = x_t.data.ndim == 1
    if single:
        x_t = T.reshape(x_t, (1, -1))
        h_prev = T.reshape(h_prev, (1, -1))
        c_prev = T.reshape(c_prev, (1, -1))
    hidden = w_h.shape[0]
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise T.ShapeError(f"state dims {h_prev.shape}, {c_prev.shape} do not match hidden_dim {hidden}")
    h, c = _cell(T.affine(x_t, w_x, b), w_h, h_prev, c_prev)
    if single:
        h, c = T.reshape(h, (hidden,)), T.reshape(c, (hidden,))
    return h, c


def _run_direction(leaves, prefix: str, frames: np.ndarray, reverse: bool) -> Tensor:
    batch, steps, dim = frames.shape
    w_x, w_h, b = (leaves[f"{prefix}_{s}"] for s in ("w_x", "w_h", "b"))
    # input projections for every step at once, time-major rows
    flat = np.ascontiguousarray(frames.transpose(1, 0, 2)).reshape(steps * batch, dim)
    pre = T.affine(flat, w_x, b)
    h = c = None
    states = []
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = T.slice_axis(pre, t * batch, (t + 1) * batch, axis=0)
        h, c = _cell(z, w_h, h, c)
        states.append(h)
    return T.mean_over_time(T.stack(states))


def forward(leaves: Mapping[str, Tensor], frames: np.ndarray) -> Tensor:
    """Embed a batch of equal-length sequences, ``frames`` of shape (B, T, dim)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise T.ShapeError(f"forward expects (batch, time, dim) frames, got {frames.shape}")
    if frames.shape[1] == 0:
        raise T.DomainError("cannot encode an empty sequence")
    expected = leaves["fwd_w_x"].shape[0]
    if frames.shape[2] != expected:
        raise T.ShapeError(f"feature dim {frames.shape[2]} does not match encoder input_dim {expected}")
    pooled_fwd = _run_direction(leaves, "fwd", frames, reverse=False)
    pooled_bwd = _run_direction(leaves, "bwd", frames, reverse=True)
    joined = T.concat(pooled_fwd, pooled_bwd, axis=-1)
    hidden = T.tanh(T.affine(joined, leaves["fc_w"], leaves["fc_b"]))
    return T.l2_normalize(hidden)


def embed(leaves: Mapping[str, Tensor], seqs: Sequence[FeatureSequence]) -> Tensor:
    """Differentiable batch embedding; rows follow the order of ``seqs``.

    Sequences are grouped by length so each group runs as one batch.
    """
    if not seqs:
        raise T.DomainError("cannot embed an empty batch")
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(len(s), []).append(i)
    if len(groups) == 1:
        return forward(leaves, np.stack([s.frames for s in seqs]))
    parts, order = [], []
    for idx in groups.values():
        parts.append(forward(leaves, np.stack([seqs[i].frames for i in idx])))
        order.extend(idx)
    inverse = np.empty(len(order), dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(len(order))
    return T.take_rows(T.concat(*parts, axis=0), inverse)


def encode(params: EncoderParams, seq: FeatureSequence) -> np.ndarray:
    if seq.dim != params.config.input_dim:
        raise T.ShapeError(f"feature dim {seq.dim} does not match encoder input_dim {params.config.input_dim}")
    return forward(params.constants(), seq.frames[None]).data[0]


def encode_batch(params: EncoderParams, seqs: Sequence[FeatureSequence]) -> np.ndarray:
    if not seqs:
        raise T.DomainError("encode_batch needs at least one sequence")
    leaves = params.constants()
    for i, s in enumerate(seqs):
        if s.dim != params.config.input_dim:
            raise T.ShapeError(
                f"sequence {i}: feature dim {s.dim} does not match encoder input_dim {params.config.input_dim}"
            )
    return embed(leaves, seqs).data


class ModelEncoder:
    """Callable adapter used by the evaluation protocols."""

    def __init__(self, params: EncoderParams, chunk: int = 256):
        self.params = params
        self.chunk = chunk

    def __call__(self, seqs: Sequence[FeatureSequence]) -> np.ndarray:
        rows = [encode_batch(self.params, seqs[i : i + self.chunk]) for i in range(0, len(seqs), self.chunk)]
        return np.concatenate(rows, axis=0)
