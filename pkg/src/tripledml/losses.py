"""Metric-learning losses and the TripleEntropy objective.

All losses consume and return :class:`~tripledml.autograd.Tensor` values so
that gradients reach the encoder, the classifier head and any proxy weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, l2_norm, log_softmax, matmul, softmax, sq_euclidean, tensor
from .errors import ContractError, ShapeError

PROB_EPS = 1e-12
# keeps sqrt differentiable when a pair coincides
_DIST_EPS = 1e-30


@dataclass(frozen=True)
class ContrastiveParams:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ContractError(f"contrastive margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class TripletParams:
    alpha: float = 0.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"triplet margin alpha must be >= 0, got {self.alpha}")


@dataclass
class ProxyNcaParams:
    proxies: Tensor  # [C, d], one learnable proxy per class

    def __post_init__(self):
        if self.proxies.ndim != 2:
            raise ShapeError(f"proxies must be [C, d], got {self.proxies.shape}")
        if not np.all(np.isfinite(self.proxies.data)):
            raise ContractError("proxies contain non-finite values")

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "ProxyNcaParams":
        w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim))
        return cls(Tensor(w, requires_grad=True))


@dataclass
class SoftTripleParams:
    """Proxy weights ``[C, k, d]`` plus the SoftTriple scales.

    ``gamma`` scales the entropy regularizer inside the relaxed similarity,
    ``lam`` sharpens the class softmax, ``delta`` is the margin subtracted
    from the true class. ``normalize`` switches to cosine similarities
    (unit-length embeddings and proxies); the default uses raw inner
    products.
    """

    weights: Tensor
    gamma: float = 0.1
    lam: float = 4.0
    delta: float = 0.1
    normalize: bool = False

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeError(f"proxy weights must be [C, k, d], got {self.weights.shape}")
        if self.k < 1:
            raise ContractError("need at least one proxy per class")
        if not self.gamma > 0:
            raise ContractError(f"gamma must be > 0, got {self.gamma}")
        if not self.lam > 0:
            raise ContractError(f"lambda must be > 0, got {self.lam}")
        if self.delta < 0:
            raise ContractError(f"delta must be >= 0, got {self.delta}")
        if not np.all(np.isfinite(self.weights.data)):
            raise ContractError("proxy weights contain non-finite values")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, num_classes: int, k: int, dim: int, rng: np.random.Generator, **scales) -> "SoftTripleParams":
        """Seeded normal proxies scaled by 1/sqrt(dim)."""
        w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, k, dim))
        return cls(Tensor(w, requires_grad=True), **scales)


@dataclass
class TripleEntropyParams:
    beta: float
    soft_triple: SoftTripleParams = field(repr=False)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ContractError(f"label {bad} out of range for {num_classes} classes")
    return labels


def normalize_rows(x: Tensor) -> Tensor:
    norms = l2_norm(x, axis=-1, keepdims=True)
    if np.any(norms.data == 0):
        raise ContractError("cannot L2-normalize a zero vector")
    return x / norms.expand(x.shape)


# -- cross-entropy --------------------------------------------------------------


def multinomial_cross_entropy(probs: Tensor, targets) -> Tensor:
    """``-(1/N) sum_i sum_c y_ic log p_ic`` with probabilities clamped to [1e-12, 1]."""
    if probs.ndim != 2:
        raise ShapeError(f"probs must be [N, C], got {probs.shape}")
    n = probs.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"targets shape {y.shape} does not match probs {probs.shape}")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ContractError(f"probability rows must sum to 1 (worst row sums to {row_sums[np.argmax(np.abs(row_sums - 1))]:.8f})")
    logp = probs.clamp(PROB_EPS, 1.0).log()
    return -(logp * tensor(y)).sum() * (1.0 / n)


# -- pair / triplet losses ----------------------------------------------------


def contrastive_loss(x1: Tensor, x2: Tensor, y: int, params: ContrastiveParams) -> Tensor:
    """``(1-Y) D^2 + Y max(0, m - D)^2`` with D the Euclidean distance; Y=1 marks a dissimilar pair."""
    if x1.shape != x2.shape:
        raise ShapeError(f"contrastive pair has mismatched shapes {x1.shape} and {x2.shape}")
    if y not in (0, 1):
        raise ContractError(f"pair label must be 0 (similar) or 1 (dissimilar), got {y}")
    sqd = sq_euclidean(x1, x2)
    if y == 0:
        return sqd
    dist = (sqd + _DIST_EPS).sqrt()
    return (params.margin - dist).relu() ** 2


def contrastive_loss_batch(embeddings: Tensor, labels, params: ContrastiveParams) -> Tensor:
    """Mean contrastive loss over every unordered pair in the batch."""
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if n < 2:
        raise ContractError("contrastive batch needs at least two embeddings")
    i, j = np.triu_indices(n, k=1)
    sqd = sq_euclidean(embeddings.gather_rows(i), embeddings.gather_rows(j))
    dissimilar = (labels[i] != labels[j]).astype(np.float64)
    dist = (sqd + _DIST_EPS).sqrt()
    per_pair = sqd * tensor(1.0 - dissimilar) + ((params.margin - dist).relu() ** 2) * tensor(dissimilar)
    return per_pair.mean()


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, params: TripletParams) -> Tensor:
    if not anchor.shape == positive.shape == negative.shape:
        raise ShapeError(f"triplet has mismatched shapes {anchor.shape}, {positive.shape}, {negative.shape}")
    return (sq_euclidean(anchor, positive) - sq_euclidean(anchor, negative) + params.alpha).relu()


def triplet_loss_batch(anchors: Tensor, positives: Tensor, negatives: Tensor, params: TripletParams) -> Tensor:
    """Sum of per-triplet hinge terms over the rows."""
    if not anchors.shape == positives.shape == negatives.shape:
        raise ShapeError(f"triplet batch has mismatched shapes {anchors.shape}, {positives.shape}, {negatives.shape}")
    return (sq_euclidean(anchors, positives) - sq_euclidean(anchors, negatives) + params.alpha).relu().sum()


def sample_triplets(labels, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One random (anchor, positive, negative) index triple per usable anchor."""
    labels = np.asarray(labels)
    anchors, positives, negatives = [], [], []
    for a, lab in enumerate(labels):
        pos = np.flatnonzero((labels == lab) & (np.arange(labels.size) != a))
        neg = np.flatnonzero(labels != lab)
        if pos.size == 0 or neg.size == 0:
            continue
        anchors.append(a)
        positives.append(pos[rng.integers(pos.size)])
        negatives.append(neg[rng.integers(neg.size)])
    return np.array(anchors, dtype=np.int64), np.array(positives, dtype=np.int64), np.array(negatives, dtype=np.int64)


# -- proxy losses -------------------------------------------------------------


def proxy_nca_loss_batch(x: Tensor, labels, params: ProxyNcaParams) -> Tensor:
    """Mean ProxyNCA loss; the denominator sums over the other classes only.

    Distances are squared Euclidean between unit-normalized samples and
    unit-normalized proxies. Because the positive proxy is excluded from
    the denominator the loss can go negative.
    """
    if x.ndim != 2 or x.shape[1] != params.proxies.shape[1]:
        raise ShapeError(f"embeddings {x.shape} do not match proxies {params.proxies.shape}")
    num_classes = params.proxies.shape[0]
    if num_classes < 2:
        raise ContractError("ProxyNCA needs at least two classes")
    labels = _check_labels(labels, num_classes)
    xh = normalize_rows(x)
    ph = normalize_rows(params.proxies)
    # |a - b|^2 = 2 - 2 a.b for unit vectors, but the explicit form keeps it exact
    sq_x = (xh * xh).sum(axis=1, keepdims=True).expand(x.shape[0], num_classes)
    sq_p = (ph * ph).sum(axis=1)
    dists = sq_x + sq_p - 2.0 * matmul(xh, ph.T)
    neg_logits = -dists
    negatives = 1.0 - one_hot(labels, num_classes)
    shift = np.max(np.where(negatives > 0, neg_logits.data, -np.inf), axis=1, keepdims=True)
    shift_t = tensor(np.broadcast_to(shift, neg_logits.shape))
    lse_neg = ((neg_logits - shift_t).exp() * tensor(negatives)).sum(axis=1).log() + tensor(shift[:, 0])
    return (dists.pick(labels) + lse_neg).mean()


def proxy_nca_loss(x: Tensor, label: int, params: ProxyNcaParams) -> Tensor:
    return proxy_nca_loss_batch(x.reshape(1, -1), [label], params)


def soft_triple_similarities(embeddings: Tensor, params: SoftTripleParams) -> Tensor:
    """Relaxed similarity of every embedding to every class, shape ``[M, C]``."""
    if embeddings.ndim != 2 or embeddings.shape[1] != params.dim:
        raise ShapeError(f"embeddings {embeddings.shape} do not match proxy dim {params.dim}")
    m = embeddings.shape[0]
    c, k, d = params.weights.shape
    proxies = params.weights.reshape(c * k, d)
    if params.normalize:
        embeddings = normalize_rows(embeddings)
        proxies = normalize_rows(proxies)
    inner = matmul(embeddings, proxies.T).reshape(m * c, k)
    weights = softmax(inner * (1.0 / params.gamma), axis=1)
    return (weights * inner).sum(axis=1).reshape(m, c)


def soft_triple_similarity(embedding: Tensor, class_id: int, params: SoftTripleParams) -> Tensor:
    _check_labels([class_id], params.num_classes)
    return soft_triple_similarities(embedding.reshape(1, -1), params).pick([class_id]).sum()


def soft_triple_loss(embeddings: Tensor, labels, params: SoftTripleParams) -> Tensor:
    """Mean SoftTriple loss over the rows of ``embeddings`` (no proxy regularizer)."""
    if params.num_classes < 2:
        raise ContractError("SoftTriple needs at least two classes (degenerate task)")
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise ContractError(f"need a non-empty [M, d] embedding matrix, got {embeddings.shape}")
    labels = _check_labels(labels, params.num_classes)
    if labels.size != embeddings.shape[0]:
        raise ShapeError(f"{labels.size} labels for {embeddings.shape[0]} embeddings")
    sims = soft_triple_similarities(embeddings, params)
    margin = tensor(params.delta * one_hot(labels, params.num_classes))
    logits = (sims - margin) * params.lam
    return -log_softmax(logits, axis=1).pick(labels).mean()


def triple_entropy_loss(
    probs: Tensor,
    targets,
    token_embeddings: Tensor,
    token_labels,
    params: TripleEntropyParams,
) -> Tensor:
    """``beta * cross-entropy + (1 - beta) * SoftTriple``.

    ``probs``/``targets`` are sentence-level; ``token_embeddings`` carries one
    row per (non-pad) token, labelled with the class of its sentence.
    """
    ce = multinomial_cross_entropy(probs, targets)
    st = soft_triple_loss(token_embeddings, token_labels, params.soft_triple)
    return ce * params.beta + st * (1.0 - params.beta)
