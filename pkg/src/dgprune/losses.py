"""Training objectives: ERM, deep CORAL and cross-domain Mixup."""
from __future__ import annotations

from itertools import combinations

import numpy as np

from . import tensor as T
from .domains import DomainBatch
from .exceptions import ConfigError
from .nn import GatedModel, features
from .tensor import Tensor

LOSSES = ("erm", "coral", "mixup")


def erm_loss(model: GatedModel, batch: DomainBatch) -> Tensor:
    logits = T.linear(features(model, batch.images), model.head_weight, model.head_bias)
    return T.softmax_cross_entropy(logits, batch.labels)


def covariance(feats: Tensor) -> Tensor:
    """Unbiased feature covariance of ``feats[n, d]``."""
    n = feats.shape[0]
    if n < 2:
        raise ConfigError("covariance needs at least two samples")
    centered = T.sub(feats, T.mean(feats, axis=0, keepdims=True))
    return T.mul(T.matmul(T.transpose(centered), centered), 1.0 / (n - 1))


def coral_penalty(domain_features: list[Tensor]) -> Tensor:
    """Mean over domain pairs of ||C_i - C_j||_F^2 / (4 d^2)."""
    if len(domain_features) < 2:
        raise ConfigError("CORAL needs at least two domains")
    d = domain_features[0].shape[1]
    covs = [covariance(f) for f in domain_features]
    terms = [T.sum_(T.square(T.sub(a, b))) for a, b in combinations(covs, 2)]
    return T.mul(T.mean_of_scalars(terms), 1.0 / (4.0 * d * d))


def coral_loss(model: GatedModel, batch: DomainBatch, lam: float = 1.0) -> Tensor:
    feats = features(model, batch.images)
    logits = T.linear(feats, model.head_weight, model.head_bias)
    ce = T.softmax_cross_entropy(logits, batch.labels)
    if lam == 0.0:
        return ce
    per_domain = [T.take(feats, s) for _, s in batch.domain_slices()]
    return T.add(ce, T.mul(coral_penalty(per_domain), lam))


def mixup_pairs(batch: DomainBatch, rng: np.random.Generator) -> np.ndarray:
    """Partner index for every sample, always drawn from a different domain.

    Sub-batch ``k`` is paired with a shuffled copy of sub-batch ``(k + r) % N``
    for one random shift ``r`` in ``1..N-1``.
    """
    slices = batch.domain_slices()
    n = len(slices)
    if n < 2:
        return rng.permutation(len(batch))
    shift = int(rng.integers(1, n))
    partner = np.empty(len(batch), dtype=np.int64)
    for k, (_, s) in enumerate(slices):
        _, t = slices[(k + shift) % n]
        src = np.arange(t.start, t.stop)
        size = s.stop - s.start
        if len(src) == size:
            partner[s] = src[rng.permutation(size)]
        else:
            partner[s] = rng.choice(src, size)
    return partner


def mixup_loss(model: GatedModel, batch: DomainBatch, lam: float, partner: np.ndarray) -> Tensor:
    """Loss on mixed inputs: lam * CE(y_a) + (1 - lam) * CE(y_b)."""
    mixed = lam * batch.images + (1.0 - lam) * batch.images[partner]
    logits = T.linear(features(model, mixed), model.head_weight, model.head_bias)
    loss_a = T.softmax_cross_entropy(logits, batch.labels)
    if lam == 1.0:
        return loss_a
    loss_b = T.softmax_cross_entropy(logits, batch.labels[partner])
    return T.add(T.mul(loss_a, lam), T.mul(loss_b, 1.0 - lam))
