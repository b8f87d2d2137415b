"""Multi-scale contrastive objectives.

All embedding inputs are L2-normalized projections (rows of ``encode``), so
dot products are cosine similarities divided by the temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ModelParams, regressor_score
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossBreakdown:
    l_gg: float
    l_gl: float
    l_ll: float
    psi: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.l_gg, self.l_gl, self.l_ll, self.psi, self.total))


def _check_pair(anchors: Tensor, positives: Tensor, tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if anchors.shape != positives.shape or anchors.values.ndim != 2:
        raise ShapeError(f"info_nce: shapes {anchors.shape} and {positives.shape} must match")
    if anchors.shape[0] < 2:
        raise ConfigError("info_nce needs a batch of at least 2 rows to form negatives")


def info_nce(anchors: Tensor, positives: Tensor, tau: float) -> Tensor:
    """Symmetrized in-batch InfoNCE.

    Row ``i`` of ``positives`` is the positive for anchor ``i``; the other
    rows serve as its negatives. The result averages the anchor->positive and
    positive->anchor cross-entropies.
    """
    _check_pair(anchors, positives, tau)
    sim = ad.scale(anchors @ positives.T, 1.0 / tau)
    diag = ad.scale(ad.reduce_sum(anchors * positives, axis=1), 1.0 / tau)
    forward = ad.mean(ad.logsumexp_rows(sim) - diag)
    backward = ad.mean(ad.logsumexp_rows(sim.T) - diag)
    return ad.scale(forward + backward, 0.5)


def loss_gg(zg1: Tensor, zg2: Tensor, tau: float) -> Tensor:
    return info_nce(zg1, zg2, tau)


def loss_gl(zg1: Tensor, zg2: Tensor, zl1: Tensor, zl2: Tensor, tau: float) -> Tensor:
    """Average of the four global/local cross-scale InfoNCE terms."""
    terms = [info_nce(g, l, tau) for g in (zg1, zg2) for l in (zl1, zl2)]
    return ad.scale(terms[0] + terms[1] + terms[2] + terms[3], 0.25)


def random_offdiagonal_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of ``range(n)`` with no fixed points (rejection sampling)."""
    if n < 2:
        raise ConfigError("need at least 2 rows to draw mismatched pairs")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def regressor_cost_psi(
    zl1: Tensor,
    zl2: Tensor,
    params: ModelParams,
    rng: np.random.Generator,
    training: bool = True,
    update_stats: bool = True,
    score_fn=None,
) -> Tensor:
    """Mean regressor score on true local pairs minus the score on mismatched pairs.

    Embeddings are detached. True and mismatched pairs are scored in one
    batch so batch-norm statistics cover both. Ascending this trains the
    regressor. ``score_fn(left, right)`` replaces the learned regressor when given.
    """
    n = zl1.shape[0]
    if n < 2:
        raise ConfigError("regressor cost needs a batch of at least 2 graphs")
    a, b = zl1.detach(), zl2.detach()
    perm = random_offdiagonal_permutation(n, rng)
    left = ad.concatenate([a, a], axis=0)
    right = ad.concatenate([b, Tensor(b.values[perm])], axis=0)
    if score_fn is None:
        scores = regressor_score(left, right, params, training=training, update_stats=update_stats)
    else:
        scores = score_fn(left, right)
    pos = ad.mean(ad.take_rows(scores, np.arange(n)))
    neg = ad.mean(ad.take_rows(scores, np.arange(n, 2 * n)))
    return pos - neg


def loss_ll(zl1: Tensor, zl2: Tensor, params: ModelParams) -> Tensor:
    """Mean learned similarity of same-graph local pairs under a frozen regressor.

    The regressor runs in eval mode with constant parameters, so the gradient
    only reaches the encoder through ``zl1`` and ``zl2``.
    """
    return ad.mean(regressor_score(zl1, zl2, params, training=False, frozen=True))


def total_loss(l_gg: Tensor, l_gl: Tensor, l_ll: Tensor, lambda1: float, lambda2: float, gg_weight: float = 1.0) -> Tensor:
    check_lambdas(lambda1, lambda2)
    return ad.scale(l_gg, gg_weight) + ad.scale(l_gl, lambda1) + ad.scale(l_ll, lambda2)


def breakdown(
    l_gg: float, l_gl: float, l_ll: float, psi: float, lambda1: float, lambda2: float, gg_weight: float = 1.0
) -> LossBreakdown:
    check_lambdas(lambda1, lambda2)
    total = gg_weight * l_gg + lambda1 * l_gl + lambda2 * l_ll
    return LossBreakdown(float(l_gg), float(l_gl), float(l_ll), float(psi), float(total))


def check_lambdas(lambda1: float, lambda2: float) -> None:
    for name, value in (("lambda1", lambda1), ("lambda2", lambda2)):
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
