"""Regularized selective-calibration training loss and its exact gradient.

The loss couples the kernel-trick selective calibration penalty (weighted by
soft selector scores) with a logarithmic barrier that keeps the scores from
collapsing to zero:

    ( (lam1 / n^2) sum_ij c_ij g_i g_j )^(1/q)  -  (lam2 / n) sum_i log g_i

with c_ij = |y_i - r_i|^q |y_j - r_j|^q k(r_i, r_j).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError
from .kernelcal import KernelSpec, ScoredBatch, gram

# Floor inside the (.)^(1/q) power: the derivative of A^(1/q) blows up as
# A -> 0 for q > 1, but near collapse the barrier dominates anyway.
PENALTY_FLOOR = 1e-12

# Scores live in (0, 1) mathematically, but a saturated sigmoid can underflow
# to exactly 0 in float64; the floor keeps the log barrier finite and caps
# its gradient.
SCORE_FLOOR = 1e-9


@dataclass(frozen=True)
class LossConfig:
    q: float = 2.0
    lambda1: float = 1024.0
    lambda2: float = 1e-3
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.q < 1:
            raise ParameterError("q must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError("regularization weights must be >= 0")


def _pair_coefficients(batch: ScoredBatch, cfg: LossConfig) -> np.ndarray:
    res = np.abs(batch.y - batch.r) ** cfg.q
    return np.outer(res, res) * gram(cfg.kernel, batch.r)


def _validate(batch: ScoredBatch, cfg: LossConfig) -> np.ndarray:
    if batch.n < 2:
        raise ParameterError("need at least 2 examples")
    if not np.isfinite(batch.g).all() or not np.isfinite(batch.r).all() \
            or not np.isfinite(batch.y).all():
        raise NumericError("non-finite batch values")
    return np.maximum(batch.g, SCORE_FLOOR)


def penalty_term(batch: ScoredBatch, cfg: LossConfig) -> float:
    """The q-th power of the first loss term, before the root."""
    c = _pair_coefficients(batch, cfg)
    g = np.maximum(batch.g, SCORE_FLOOR)
    return float(g @ c @ g) * cfg.lambda1 / batch.n**2


def loss_value(batch: ScoredBatch, cfg: LossConfig) -> float:
    g = _validate(batch, cfg)
    c = _pair_coefficients(batch, cfg)
    a = float(g @ c @ g) * cfg.lambda1 / batch.n**2
    barrier = -cfg.lambda2 / batch.n * float(np.log(g).sum())
    return max(a, PENALTY_FLOOR) ** (1.0 / cfg.q) + barrier


def loss_grad_scores(batch: ScoredBatch, cfg: LossConfig) -> np.ndarray:
    """d(loss)/d(g_i) for every example.

    When the penalty sits at exactly zero, sum_j c_ij g_j vanishes for all i
    (every term is non-negative), so the first part contributes nothing and
    the barrier gradient is returned on its own.
    """
    g = _validate(batch, cfg)
    c = _pair_coefficients(batch, cfg)
    a = float(g @ c @ g) * cfg.lambda1 / batch.n**2
    a_f = max(a, PENALTY_FLOOR)
    outer = (1.0 / cfg.q) * a_f ** (1.0 / cfg.q - 1.0)
    first = outer * (cfg.lambda1 / batch.n**2) * 2.0 * (c @ g)
    barrier = -cfg.lambda2 / (batch.n * g)
    return first + barrier
