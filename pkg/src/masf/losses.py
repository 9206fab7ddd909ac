"""Cross-entropy, soft-confusion alignment and triplet losses."""

from __future__ import annotations

import dataclasses

import numpy as np

from .network import features, logits
from .tensor import Tensor, as_tensor, clip_min, log, log_softmax, matmul, relu, softmax, sqdist, take

__all__ = [
    "ConfigError",
    "DegenerateBatchError",
    "LossWeights",
    "class_mean_embedding",
    "class_mean_matrix",
    "class_soft_distributions",
    "cross_entropy",
    "gen_loss",
    "gen_loss_from_features",
    "meta_loss",
    "pair_gen_loss",
    "sym_kl",
    "tempered_softmax",
    "triplet_loss",
]

KL_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Meta-loss weights, softmax temperature and triplet margin."""

    beta1: float = 1.0
    beta2: float = 0.005
    tau: float = 2.0
    zeta: float = 0.1

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta1 and beta2 must be non-negative")
        if not self.tau > 1:
            raise ConfigError(f"temperature must exceed 1, got {self.tau}")
        if self.zeta < 0:
            raise ConfigError("triplet margin must be >= 0")


def cross_entropy(scores, labels) -> Tensor:
    """Mean of ``-log softmax(scores)[label]`` over the batch."""
    scores = as_tensor(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = scores.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = log_softmax(scores)
    return -take(logp, (np.arange(n), labels)).mean()


def class_mean_matrix(feats, labels) -> tuple[np.ndarray, Tensor]:
    """Sorted present class ids and the matching rows of class-mean features."""
    feats = as_tensor(feats)
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    avg = np.zeros((len(classes), len(labels)))
    avg[inverse, np.arange(len(labels))] = 1.0
    avg /= counts[:, None]
    return classes, matmul(Tensor._wrap(avg), feats)


def class_mean_embedding(feats, labels) -> dict[int, Tensor]:
    """Mean feature row per class present in the batch.

    Classes with no samples are simply absent from the result.
    """
    classes, means = class_mean_matrix(feats, labels)
    return {int(c): take(means, slice(i, i + 1)) for i, c in enumerate(classes)}


def tempered_softmax(scores, tau: float) -> Tensor:
    if not tau > 1:
        raise ConfigError(f"temperature must exceed 1, got {tau}")
    return softmax(scores, tau=tau)


def sym_kl(p, q, check: bool = True) -> Tensor:
    """Symmetrized KL divergence, ``(KL(p||q) + KL(q||p)) / 2``.

    Inputs are floored at 1e-12 before the log. ``check`` validates that both
    are positive and normalized along the last axis.
    """
    p, q = as_tensor(p), as_tensor(q)
    if check:
        for name, t in (("p", p), ("q", q)):
            if np.any(t.data <= 0):
                raise ValueError(f"{name} must be strictly positive")
            if not np.allclose(t.data.sum(axis=-1), 1.0, atol=1e-9):
                raise ValueError(f"{name} must sum to 1")
    lp = log(clip_min(p, KL_FLOOR))
    lq = log(clip_min(q, KL_FLOOR))
    return 0.5 * ((p - q) * (lp - lq)).sum(axis=-1)


def class_soft_distributions(theta: dict, feats, labels, tau: float) -> tuple[np.ndarray, Tensor]:
    """Tempered softmax of the task-head scores of each class-mean embedding.

    Returns the present class ids and one probability row per class.
    """
    classes, means = class_mean_matrix(feats, labels)
    return classes, tempered_softmax(logits(theta, means), tau)


def pair_gen_loss(soft_i, soft_j) -> Tensor | None:
    """Class-averaged symmetric KL between two domains; ``None`` if no class is shared."""
    (ci, pi), (cj, pj) = soft_i, soft_j
    shared, ii, jj = np.intersect1d(ci, cj, assume_unique=True, return_indices=True)
    if len(shared) == 0:
        return None
    return sym_kl(take(pi, ii), take(pj, jj), check=False).mean()


def gen_loss(meta_train, meta_test, psi: dict, theta: dict, tau: float) -> Tensor:
    """Mean pairwise alignment loss between meta-train and meta-test domains.

    ``meta_train`` and ``meta_test`` are sequences of ``(x, y)`` batches, one
    per domain. Pairs that share no class are skipped.
    """
    def feats(batches):
        return [(features(psi, x), y) for x, y in batches]

    return gen_loss_from_features(feats(meta_train), feats(meta_test), theta, tau)


def gen_loss_from_features(meta_train, meta_test, theta: dict, tau: float) -> Tensor:
    """:func:`gen_loss` on precomputed ``(features, labels)`` pairs."""
    def soft(pairs):
        return [class_soft_distributions(theta, f, y, tau) for f, y in pairs]

    tr, te = soft(meta_train), soft(meta_test)
    total, count = None, 0
    for si in tr:
        for sj in te:
            term = pair_gen_loss(si, sj)
            if term is None:
                continue
            total = term if total is None else total + term
            count += 1
    if total is None:
        raise DegenerateBatchError("no class co-occurs in any meta-train/meta-test pair")
    return total * (1.0 / count)


def triplet_loss(anchor, positive, negative, zeta: float) -> Tensor:
    """Mean hinge of ``d(a, p) - d(a, n) + zeta`` with squared distances."""
    anchor, positive, negative = as_tensor(anchor), as_tensor(positive), as_tensor(negative)
    if anchor.shape[0] == 0:
        raise ValueError("empty triplet set")
    return relu(sqdist(anchor, positive) - sqdist(anchor, negative) + zeta).mean()


def meta_loss(gen, tri, weights: LossWeights):
    return weights.beta1 * gen + weights.beta2 * tri
