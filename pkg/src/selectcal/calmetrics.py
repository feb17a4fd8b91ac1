"""Binned calibration error, Brier score, selective risk, and coverage sweeps.

Binned errors use equal-mass binning: selected examples are sorted by
confidence and split into bins whose sizes differ by at most one; the
reported error aggregates per-bin |mean(y) - mean(r)| gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateSelectionError, InsufficientDataError, ParameterError
from .kernelcal import ScoredBatch

DEFAULT_COVERAGE_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))

METRIC_NAMES = ("s_bce2", "s_bce_inf", "s_brier", "s_risk")


@dataclass(frozen=True)
class BinningPolicy:
    """Equal-mass binning with m = min(max_bins, floor(n / min_per_bin))."""

    max_bins: int = 15
    min_per_bin: int = 25

    def num_bins(self, n: int) -> int:
        m = min(self.max_bins, n // self.min_per_bin)
        if m < 1:
            raise InsufficientDataError(
                f"{n} selected examples < min_per_bin={self.min_per_bin}"
            )
        return m


def equal_mass_bins(n: int, m: int) -> list:
    """Bin sizes for n items in m bins; remainder spread one per bin from the
    first (lowest-confidence) bin.  Sizes differ by at most 1."""
    base, rem = divmod(n, m)
    return [base + 1 if i < rem else base for i in range(m)]


def binned_calibration_error(batch: ScoredBatch, q, policy: BinningPolicy) -> float:
    """Selective binned calibration error with q = 2 or infinity.

    g must be hard bits.  Sorting is stable, so ties in r keep their original
    order.
    """
    if q not in (2, float("inf"), math.inf):
        raise ParameterError("q must be 2 or infinity for the binned estimator")
    if not np.all((batch.g == 0.0) | (batch.g == 1.0)):
        raise ParameterError("binned estimator requires hard selection bits")
    sel = batch.g == 1.0
    r, y = batch.r[sel], batch.y[sel]
    n = len(r)
    m = policy.num_bins(n)
    order = np.argsort(r, kind="stable")
    r, y = r[order], y[order]
    sizes = equal_mass_bins(n, m)
    diffs = np.empty(m)
    start = 0
    for i, size in enumerate(sizes):
        stop = start + size
        diffs[i] = abs(y[start:stop].mean() - r[start:stop].mean())
        start = stop
    if q == 2:
        return float(np.sqrt((diffs**2).mean()))
    return float(diffs.max())


def brier(batch: ScoredBatch, selective: bool = False) -> float:
    """Mean squared error between confidence and outcome, optionally only
    over the selected examples."""
    if selective:
        if not np.all((batch.g == 0.0) | (batch.g == 1.0)):
            raise ParameterError("selective Brier requires hard selection bits")
        sel = batch.g == 1.0
        if not sel.any():
            raise DegenerateSelectionError("selector accepted nothing")
        r, y = batch.r[sel], batch.y[sel]
    else:
        r, y = batch.r, batch.y
    return float(((r - y) ** 2).mean())


def selective_risk_and_coverage(correct: np.ndarray, g: np.ndarray) -> tuple:
    """(risk, coverage) from 0/1 correctness bits and hard selection bits.

    Risk is the 0/1 error over selected examples; it is returned as nan when
    coverage is zero.
    """
    correct = np.asarray(correct, dtype=float)
    g = np.asarray(g, dtype=float)
    if len(correct) != len(g) or len(g) < 1:
        raise ParameterError("correct and g must be equal-length, non-empty")
    coverage = float(g.mean())
    if coverage == 0.0:
        return float("nan"), 0.0
    sel = g == 1.0
    risk = float(1.0 - correct[sel].mean())
    return risk, coverage


@dataclass
class EvalBatch:
    """Everything the sweep needs about one test set: calibration-reduction
    confidences/outcomes plus top-label correctness for the risk column."""

    r: np.ndarray
    y: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.correct = np.asarray(self.correct, dtype=float)
        if not (len(self.r) == len(self.y) == len(self.correct)):
            raise ParameterError("fields must have equal length")

    @property
    def n(self) -> int:
        return len(self.r)


@dataclass
class CoverageCurve:
    """Per-method table of (coverage, s_bce2, s_bce_inf, s_brier, s_risk)
    rows with trapezoid AUC summaries normalized by the grid span."""

    method: str
    rows: list  # (coverage, s_bce2, s_bce_inf, s_brier, s_risk)
    aucs: dict = field(default_factory=dict)

    def values(self, metric: str) -> np.ndarray:
        col = 1 + METRIC_NAMES.index(metric)
        return np.array([row[col] for row in self.rows])

    def coverages(self) -> np.ndarray:
        return np.array([row[0] for row in self.rows])


def curve_auc(grid: np.ndarray, values: np.ndarray) -> float:
    """Trapezoid AUC divided by the grid span, so a constant metric e has
    AUC exactly e."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(grid) == 1:
        return float(values[0])
    span = grid[-1] - grid[0]
    return float(np.trapezoid(values, grid) / span)


def metrics_at_selection(batch: EvalBatch, g: np.ndarray, policy: BinningPolicy) -> tuple:
    scored = ScoredBatch(batch.r, batch.y, g)
    bce2 = binned_calibration_error(scored, 2, policy)
    bceinf = binned_calibration_error(scored, float("inf"), policy)
    sbrier = brier(scored, selective=True)
    risk, _ = selective_risk_and_coverage(batch.correct, g)
    return bce2, bceinf, sbrier, risk


def sweep_curve(scores: Optional[np.ndarray], batch: EvalBatch,
                grid: Sequence[float] = DEFAULT_COVERAGE_GRID,
                policy: BinningPolicy = BinningPolicy(),
                method: str = "method") -> CoverageCurve:
    """Threshold `scores` at every grid coverage and compute all selective
    metrics.  `scores=None` means no selection (everything accepted at every
    grid point, the full-model reference)."""
    grid = np.asarray(grid, dtype=float)
    if (np.diff(grid) <= 0).any():
        raise ParameterError("coverage grid must be strictly increasing")
    if grid[0] < 0.05 - 1e-12 or grid[-1] > 1.0 + 1e-12:
        raise ParameterError("coverage grid must lie within [0.05, 1]")
    from .selector import threshold_rule  # local import to avoid a cycle

    rows = []
    for xi in grid:
        if scores is None:
            g = np.ones(batch.n)
        else:
            tau = threshold_rule(float(xi), scores)
            g = (np.asarray(scores, dtype=float) >= tau).astype(float)
        try:
            bce2, bceinf, sbrier, risk = metrics_at_selection(batch, g, policy)
        except InsufficientDataError as err:
            raise InsufficientDataError(
                f"coverage {xi:.2f}: {err}"
            ) from err
        rows.append((float(xi), bce2, bceinf, sbrier, risk))
    curve = CoverageCurve(method=method, rows=rows)
    for name in METRIC_NAMES:
        curve.aucs[name] = curve_auc(grid, curve.values(name))
    return curve


CURVE_HEADER = "method,coverage,s_bce2,s_bce_inf,s_brier,s_risk"
AUC_HEADER = "method,metric,auc"


def format_curve_rows(curve: CoverageCurve) -> list:
    lines = []
    for cov, bce2, bceinf, sbrier, risk in curve.rows:
        lines.append(
            f"{curve.method},{cov:.12g},{bce2:.12g},{bceinf:.12g},{sbrier:.12g},{risk:.12g}"
        )
    return lines


def write_curves_csv(curves: Sequence[CoverageCurve], path) -> None:
    lines = [CURVE_HEADER]
    for curve in curves:
        lines.extend(format_curve_rows(curve))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_auc_csv(rows: Sequence[tuple], path) -> None:
    """rows: (method, metric, auc) triples."""
    lines = [AUC_HEADER]
    for method, metric, auc in rows:
        lines.append(f"{method},{metric},{auc:.12g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
