"""Triplet loss (all triplets or semi-hard mined) and prototypical network loss."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DistanceKind(str, Enum):
    SQEUCLIDEAN = "euc"
    COSINE = "cos"

    @classmethod
    def parse(cls, value) -> "DistanceKind":
        if isinstance(value, cls):
            return value
        aliases = {"euc": cls.SQEUCLIDEAN, "sqeuclidean": cls.SQEUCLIDEAN, "cos": cls.COSINE, "cosine": cls.COSINE}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown distance {value!r}; expected 'euc' or 'cos'") from None


@dataclass(frozen=True)
class Margin:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"margin must be non-negative, got {self.alpha}")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class Prototype:
    speaker_id: int
    center: np.ndarray


class NoTripletError(ValueError):
    pass


def _margin(margin) -> float:
    if isinstance(margin, Margin):
        return margin.alpha
    return Margin(float(margin)).alpha


def distance_matrix(a, b, dist: DistanceKind = DistanceKind.SQEUCLIDEAN) -> Tensor:
    dist = DistanceKind.parse(dist)
    if dist is DistanceKind.SQEUCLIDEAN:
        return T.pairwise_sq_euclidean(a, b)
    return T.pairwise_cosine_distance(a, b)


def triplet_loss(d_ap, d_an, margin=Margin()):
    """Hinge ``max(0, d_ap - d_an + alpha)``.

    Works on floats or on tensors (scalar or elementwise over vectors).
    """
    alpha = _margin(margin)
    if isinstance(d_ap, Tensor) or isinstance(d_an, Tensor):
        return T.relu(T.add_scalar(T.sub(d_ap, d_an), alpha))
    return max(0.0, float(d_ap) - float(d_an) + alpha)


def enumerate_triplets(labels: Sequence[int]) -> list[Triplet]:
    """Every (anchor, positive, negative) with anchor != positive."""
    labels = list(labels)
    out = []
    for a, la in enumerate(labels):
        for p, lp in enumerate(labels):
            if p == a or lp != la:
                continue
            for n, ln in enumerate(labels):
                if ln != la:
                    out.append(Triplet(a, p, n))
    return out


def _hinge_sum(dists: Tensor, triplets: Sequence[Triplet], alpha: float) -> Tensor:
    idx = np.asarray(triplets, dtype=np.intp)
    d_ap = T.gather(dists, idx[:, 0], idx[:, 1])
    d_an = T.gather(dists, idx[:, 0], idx[:, 2])
    return T.sum(triplet_loss(d_ap, d_an, Margin(alpha)))


def tl_batch_naive(embeddings, labels, margin=Margin(), dist=DistanceKind.SQEUCLIDEAN) -> Tensor:
    """Sum of the triplet hinge over all valid triplets in the batch."""
    triplets = enumerate_triplets(labels)
    if not triplets:
        raise NoTripletError("batch contains no valid triplet")
    emb = T.as_tensor(embeddings)
    return _hinge_sum(distance_matrix(emb, emb, dist), triplets, _margin(margin))


def select_semihard(dists: np.ndarray, labels: Sequence[int]) -> list[Triplet]:
    """One negative per ordered positive pair.

    Picks the closest negative that is still farther than the positive; if
    there is none, the farthest negative.  Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    dists = np.asarray(dists)
    out = []
    for a in range(len(labels)):
        negatives = np.flatnonzero(labels != labels[a])
        positives = np.flatnonzero(labels == labels[a])
        positives = positives[positives != a]
        if positives.size and not negatives.size:
            raise NoTripletError(f"anchor {a} has no negative in the batch")
        d_neg = dists[a, negatives]
        for p in positives:
            farther = d_neg > dists[a, p]
            if farther.any():
                candidates = np.where(farther, d_neg, np.inf)
                n = negatives[int(np.argmin(candidates))]
            else:
                n = negatives[int(np.argmax(d_neg))]
            out.append(Triplet(a, int(p), int(n)))
    return out


def tl_batch_semihard(embeddings, labels, margin=Margin(), dist=DistanceKind.SQEUCLIDEAN) -> Tensor:
    emb = T.as_tensor(embeddings)
    dists = distance_matrix(emb, emb, dist)
    triplets = select_semihard(dists.data, labels)
    if not triplets:
        raise NoTripletError("batch contains no valid triplet")
    return _hinge_sum(dists, triplets, _margin(margin))


def _class_index(labels: Sequence[int]) -> tuple[list[int], np.ndarray]:
    classes = sorted(set(int(x) for x in labels))
    lookup = {c: k for k, c in enumerate(classes)}
    return classes, np.asarray([lookup[int(x)] for x in labels], dtype=np.intp)


def _averaging_matrix(codes: np.ndarray, n_classes: int) -> np.ndarray:
    avg = np.zeros((n_classes, codes.size))
    avg[codes, np.arange(codes.size)] = 1.0
    return avg / avg.sum(axis=1, keepdims=True)


def compute_prototypes(support_embeddings, support_labels) -> list[Prototype]:
    """Per-speaker mean of the support embeddings, sorted by speaker id."""
    emb = np.asarray(T.as_tensor(support_embeddings).data)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise T.DomainError("compute_prototypes needs a non-empty support matrix")
    if len(support_labels) != emb.shape[0]:
        raise T.ShapeError(f"{len(support_labels)} labels for {emb.shape[0]} support embeddings")
    labels = np.asarray(support_labels)
    return [Prototype(int(c), emb[labels == c].mean(axis=0)) for c in sorted(set(labels.tolist()))]


def prototype_tensor(support_embeddings, support_labels) -> tuple[list[int], Tensor]:
    """Differentiable prototypes as rows of a (K, M) tensor."""
    classes, codes = _class_index(support_labels)
    return classes, T.matmul(_averaging_matrix(codes, len(classes)), T.as_tensor(support_embeddings))


def pnl_posterior(query_embedding, prototypes: Sequence[Prototype], dist=DistanceKind.SQEUCLIDEAN) -> np.ndarray:
    """Softmax over negative distances from the query to each prototype."""
    if not prototypes:
        raise T.DomainError("pnl_posterior needs at least one prototype")
    q = np.asarray(T.as_tensor(query_embedding).data).reshape(1, -1)
    centers = np.stack([p.center for p in prototypes])
    d = distance_matrix(q, centers, dist).data[0]
    logits = -d
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def pnl_batch(support_embeddings, support_labels, query_embeddings, query_labels, dist=DistanceKind.SQEUCLIDEAN) -> Tensor:
    """Sum over queries of -log p(true speaker | query)."""
    classes, proto = prototype_tensor(support_embeddings, support_labels)
    lookup = {c: k for k, c in enumerate(classes)}
    missing = sorted(set(int(y) for y in query_labels) - set(classes))
    if missing:
        raise ValueError(f"query label(s) {missing} have no prototype in the support set")
    target = np.asarray([lookup[int(y)] for y in query_labels], dtype=np.intp)
    d = distance_matrix(T.as_tensor(query_embeddings), proto, dist)
    # -log softmax(-d)[y] = d[y] + logsumexp(-d)
    own = T.gather(d, np.arange(target.size), target)
    return T.add(T.sum(own), T.sum(T.logsumexp_rows(T.scale(d, -1.0))))
