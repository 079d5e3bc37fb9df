"""Finite-difference verification of every loss on seeded random instances."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, grad_check, softmax, tensor
from .losses import (
    ContrastiveParams,
    ProxyNcaParams,
    SoftTripleParams,
    TripleEntropyParams,
    TripletParams,
    contrastive_loss_batch,
    multinomial_cross_entropy,
    one_hot,
    proxy_nca_loss_batch,
    soft_triple_loss,
    triple_entropy_loss,
    triplet_loss_batch,
)

TOLERANCE = 1e-5
# hinge arguments closer than this to their kink are redrawn; a central
# difference straddling the kink is not a gradient error
KINK_CLEARANCE = 1e-2


@dataclass(frozen=True)
class GradCheckResult:
    loss: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _contrastive(rng):
    margin = 2.0
    while True:
        x = rng.normal(size=(4, 3))
        labels = np.array([0, 0, 1, 1])
        i, j = np.triu_indices(4, k=1)
        dist = np.sqrt(((x[i] - x[j]) ** 2).sum(axis=1))
        if np.all(np.abs(margin - dist[labels[i] != labels[j]]) > KINK_CLEARANCE):
            break
    params = ContrastiveParams(margin)
    return (lambda e: contrastive_loss_batch(e, labels, params)), [tensor(x)]


def _triplet(rng):
    alpha = 0.2
    while True:
        a, p, n = (rng.normal(size=(3, 3)) for _ in range(3))
        arg = ((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1) + alpha
        if np.all(np.abs(arg) > KINK_CLEARANCE) and np.any(arg > 0):
            break
    params = TripletParams(alpha)
    return (lambda x, y, z: triplet_loss_batch(x, y, z, params)), [tensor(a), tensor(p), tensor(n)]


def _proxy_nca(rng):
    labels = rng.integers(0, 3, size=5)
    x, proxies = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    return (lambda e, w: proxy_nca_loss_batch(e, labels, ProxyNcaParams(w))), [tensor(x), tensor(proxies)]


def _soft_triple(rng):
    labels = rng.integers(0, 3, size=6)
    e, w = rng.normal(size=(6, 4)), rng.normal(size=(3, 2, 4))
    return (lambda x, ww: soft_triple_loss(x, labels, SoftTripleParams(ww, gamma=0.1, lam=4.0, delta=0.1))), \
        [tensor(e), tensor(w)]


def _cross_entropy(rng):
    targets = one_hot(rng.integers(0, 3, size=4), 3)
    logits = rng.normal(size=(4, 3))
    # perturbing logits keeps every probability row on the simplex
    return (lambda z: multinomial_cross_entropy(softmax(z, axis=1), targets)), [tensor(logits)]


def _triple_entropy(rng):
    sent_labels = rng.integers(0, 3, size=3)
    tok_labels = np.repeat(sent_labels, 2)
    logits, tokens, w = rng.normal(size=(3, 3)), rng.normal(size=(6, 4)), rng.normal(size=(3, 2, 4))
    beta = float(rng.uniform(0.05, 0.95))
    targets = one_hot(sent_labels, 3)

    def f(z, t, ww):
        params = TripleEntropyParams(beta, SoftTripleParams(ww, gamma=0.1, lam=4.0, delta=0.1))
        return triple_entropy_loss(softmax(z, axis=1), targets, t, tok_labels, params)

    return f, [tensor(logits), tensor(tokens), tensor(w)]


INSTANCE_BUILDERS: dict[str, Callable] = {
    "contrastive": _contrastive,
    "triplet": _triplet,
    "proxynca": _proxy_nca,
    "softtriple": _soft_triple,
    "ce": _cross_entropy,
    "tripleentropy": _triple_entropy,
}


def check_loss(name: str, instances: int = 50, seed: int = 0, h: float = 1e-5) -> GradCheckResult:
    builder = INSTANCE_BUILDERS[name]
    worst = 0.0
    start = time.perf_counter()
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, list(INSTANCE_BUILDERS).index(name), i]))
        f, xs = builder(rng)
        worst = max(worst, float(grad_check(f, xs, h=h)))
    return GradCheckResult(name, instances, worst, time.perf_counter() - start)


def check_all(instances: int = 50, seed: int = 0, h: float = 1e-5) -> list[GradCheckResult]:
    return [check_loss(name, instances, seed, h) for name in INSTANCE_BUILDERS]
