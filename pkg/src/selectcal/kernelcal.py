"""Laplace-kernel calibration statistics.

All estimators work on a batch of (confidence r, outcome y, selector weight g)
triples and use the kernel trick: the RKHS feature map is never materialized.
The selective statistics return the squared-embedding-norm form

    ( sum_ij w_i w_j k(r_i, r_j) / normalizer )^(1/q)

which is the quantity the regularized training loss and all comparisons in
this package are expressed in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateSelectionError, ParameterError


@dataclass(frozen=True)
class KernelSpec:
    """Laplace kernel k(a, b) = exp(-|a - b| / sigma); k(a, a) = 1."""

    kind: str = "laplace"
    sigma: float = 0.2

    def __post_init__(self):
        if self.kind != "laplace":
            raise ParameterError(f"unsupported kernel kind {self.kind!r}")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")


@dataclass
class ScoredBatch:
    """Per-example confidences, outcomes, and selector scores, all in [0, 1].

    For binary tasks r is the model's probability of class 1 and y the raw
    label; for multi-class tasks r is the top-label confidence and y the
    top-label correctness bit.  g may be soft scores or hard 0/1 bits.
    """

    r: np.ndarray
    y: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        n = len(self.r)
        if len(self.y) != n or len(self.g) != n:
            raise ParameterError("r, y, g must have equal length")
        for name, arr in (("r", self.r), ("y", self.y), ("g", self.g)):
            if arr.ndim != 1 or (arr < 0).any() or (arr > 1).any() or not np.isfinite(arr).all():
                raise ParameterError(f"{name} entries must be finite and in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.r)


def kernel_eval(spec: KernelSpec, r1: float, r2: float) -> float:
    """Pointwise kernel value."""
    return float(np.exp(-abs(r1 - r2) / spec.sigma))


def gram(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """Full kernel matrix over a confidence vector."""
    r = np.asarray(r, dtype=float)
    return np.exp(-np.abs(r[:, None] - r[None, :]) / spec.sigma)


def empirical_mmce_sq(batch: ScoredBatch, spec: KernelSpec) -> float:
    """Squared kernel calibration error with signed residuals and no selection:

        (1/n^2) sum_ij (y_i - r_i)(y_j - r_j) k(r_i, r_j)

    Residuals of opposite sign cancel, unlike the selective variants below.
    """
    if batch.n < 2:
        raise ParameterError("need at least 2 examples")
    if not np.all(batch.g == 1.0):
        raise ParameterError("this statistic is defined for g identically 1")
    res = batch.y - batch.r
    k = gram(spec, batch.r)
    return float(res @ k @ res) / batch.n**2


def empirical_smmce_u(batch: ScoredBatch, q: float, spec: KernelSpec) -> float:
    """Kernel-trick estimate of the selective calibration penalty:

        ( sum_ij |y_i-r_i|^q |y_j-r_j|^q g_i g_j k(r_i,r_j) / sum_ij g_i g_j )^(1/q)

    Works with soft or hard g.  Invariant to duplicating the whole batch.
    """
    if q < 1:
        raise ParameterError("q must be >= 1")
    gsum = batch.g.sum()
    if gsum <= 0:
        raise DegenerateSelectionError("selector accepted nothing")
    w = np.abs(batch.y - batch.r) ** q * batch.g
    k = gram(spec, batch.r)
    num = float(w @ k @ w)
    den = gsum**2
    return (num / den) ** (1.0 / q)


def naive_smmce_u(batch: ScoredBatch, q: float, spec: KernelSpec) -> float:
    """Reference double-loop evaluation of `empirical_smmce_u`, no shortcuts."""
    if q < 1:
        raise ParameterError("q must be >= 1")
    num = 0.0
    den = 0.0
    for i in range(batch.n):
        for j in range(batch.n):
            kij = kernel_eval(spec, batch.r[i], batch.r[j])
            num += (abs(batch.y[i] - batch.r[i]) ** q
                    * abs(batch.y[j] - batch.r[j]) ** q
                    * batch.g[i] * batch.g[j] * kij)
            den += batch.g[i] * batch.g[j]
    if den <= 0:
        raise DegenerateSelectionError("selector accepted nothing")
    return (num / den) ** (1.0 / q)


def plug_in_smmce(batch: ScoredBatch, cond: Callable[[np.ndarray], np.ndarray],
                  q: float, spec: KernelSpec) -> float:
    """Plug-in selective calibration error for analytically known conditionals.

    `cond` maps a confidence r to the true E[Y | V = r] over the selected
    region; g must be hard bits.  Residuals are e_i = |cond(r_i) - r_i|^q and
    the returned value is ( sum_ij e_i e_j k / (sum g)^2 )^(1/q) over the
    selected examples.
    """
    if q < 1:
        raise ParameterError("q must be >= 1")
    if not np.all((batch.g == 0.0) | (batch.g == 1.0)):
        raise ParameterError("plug-in form requires hard selection bits")
    sel = batch.g == 1.0
    if not sel.any():
        raise DegenerateSelectionError("selector accepted nothing")
    r = batch.r[sel]
    e = np.abs(np.asarray(cond(r), dtype=float) - r) ** q
    k = gram(spec, r)
    num = float(e @ k @ e)
    return (num / sel.sum() ** 2) ** (1.0 / q)
