"""Evaluation protocol: retrain the selector several times, bootstrap the
test data, and compare selection methods on shifted test sets via
coverage-vs-metric curves and their AUCs.

Methods compared: the trained selector ("smmce"), no selection ("full"), raw
confidence, and the density baselines (KDE log-density, isolation forest,
kNN distance) reused as selection scores.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basemodel import BaseModel
from .calmetrics import (DEFAULT_COVERAGE_GRID, METRIC_NAMES, AUC_HEADER,
                         BinningPolicy, CURVE_HEADER, CoverageCurve, EvalBatch,
                         curve_auc, sweep_curve)
from .errors import InsufficientDataError, ParameterError
from .kernelcal import ScoredBatch
from .losses import LossConfig
from .metafeatures import FeatureExtractor, baseline_scores, extract_batch
from .selector import HardSelector, forward
from .synthdata import (LabeledDataset, PerturbationFamily, PerturbationSpec,
                        apply_perturbation)
from .training import TrainConfig, calibration_reduction, train

METHODS = ("smmce", "full", "confidence", "neg_kde", "neg_iforest", "neg_knn")


@dataclass(frozen=True)
class TrialPlan:
    test_perturbations: tuple
    num_retrains: int = 5
    num_test_resamples: int = 5
    grid: tuple = DEFAULT_COVERAGE_GRID
    seed: int = 0

    def __post_init__(self):
        if self.num_retrains < 1 or self.num_test_resamples < 1:
            raise ParameterError("need at least one retrain and one resample")
        if len(self.test_perturbations) == 0:
            raise ParameterError("plan needs at least one test perturbation")


@dataclass
class EvalTask:
    """Everything a trial needs: the frozen model, fitted extractor, data
    splits, and the training-time perturbation family."""

    model: BaseModel
    extractor: FeatureExtractor
    train_data: LabeledDataset
    tune_data: LabeledDataset
    test_data: LabeledDataset
    family: PerturbationFamily
    train_cfg: TrainConfig
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    policy: BinningPolicy = field(default_factory=BinningPolicy)
    fixed_selector: Optional[HardSelector] = None  # skip retraining when set


@dataclass
class ResultTable:
    curves: list = field(default_factory=list)   # (trial, perturbation, method, CoverageCurve)
    aggregate: list = field(default_factory=list)  # (method, metric, mean_auc, std_auc)
    flagged: list = field(default_factory=list)  # (trial, perturbation, method, message)

    def rows(self):
        """Long-form (trial, method, perturbation, metric, coverage, value)."""
        for trial, pert, method, curve in self.curves:
            for metric in METRIC_NAMES:
                for cov, value in zip(curve.coverages(), curve.values(metric)):
                    yield trial, method, pert, metric, float(cov), float(value)

    def write_curves_csv(self, path) -> None:
        """Per-trial rows under the standard curve header, trial-major order."""
        lines = [CURVE_HEADER]
        for _, _, _, curve in self.curves:
            for cov, bce2, bceinf, sbrier, risk in curve.rows:
                lines.append(f"{curve.method},{cov:.12g},{bce2:.12g},{bceinf:.12g},"
                             f"{sbrier:.12g},{risk:.12g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_auc_csv(self, path) -> None:
        """Aggregate table; std rows carry a `_std` suffix on the metric."""
        lines = [AUC_HEADER]
        for method, metric, mean_auc, std_auc in self.aggregate:
            lines.append(f"{method},{metric},{mean_auc:.12g}")
            lines.append(f"{method},{metric}_std,{std_auc:.12g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _validate_disjoint(plan: TrialPlan, family: PerturbationFamily) -> None:
    for spec in plan.test_perturbations:
        if spec.kind in family.kinds:
            lo, hi = family.range_for(spec.kind)
            if lo <= spec.intensity <= hi:
                raise ParameterError(
                    f"test perturbation {spec.kind} intensity {spec.intensity} "
                    f"overlaps the training family range [{lo}, {hi}]"
                )


def _method_scores(task: EvalTask, soft, data: LabeledDataset) -> dict:
    scores = {}
    meta = extract_batch(task.extractor, task.model, data.features)
    scores["smmce"], _ = forward(soft, meta)
    scores["full"] = None
    scores.update(baseline_scores(task.extractor, task.model, data.features))
    return scores


def _eval_batch(task: EvalTask, data: LabeledDataset) -> EvalBatch:
    r, y, correct = calibration_reduction(task.model, data)
    return EvalBatch(r=r, y=y, correct=correct)


def _run_retrain(task: EvalTask, plan: TrialPlan, retrain: int,
                 retrain_seed: int, resample_seeds: list) -> tuple:
    if task.fixed_selector is not None:
        hard = task.fixed_selector
    else:
        cfg = TrainConfig(
            xi=task.train_cfg.xi, m=task.train_cfg.m, kappa=task.train_cfg.kappa,
            sample_size=task.train_cfg.sample_size, epochs=task.train_cfg.epochs,
            steps_per_epoch=task.train_cfg.steps_per_epoch,
            learning_rate=task.train_cfg.learning_rate, seed=retrain_seed,
            use_kappa_worst=task.train_cfg.use_kappa_worst,
        )
        hard, _ = train(task.model, task.extractor, task.train_data,
                        task.tune_data, task.family, cfg, task.loss_cfg, task.policy)

    curves, flagged = [], []
    for resample in range(plan.num_test_resamples):
        trial = retrain * plan.num_test_resamples + resample
        rng = np.random.default_rng(resample_seeds[resample])
        idx = rng.choice(task.test_data.n, size=task.test_data.n, replace=True)
        boot = task.test_data.subset(idx)
        for spec in plan.test_perturbations:
            shifted = apply_perturbation(boot, spec)
            batch = _eval_batch(task, shifted)
            scores = _method_scores(task, hard.soft, shifted)
            for method in METHODS:
                try:
                    curve = sweep_curve(scores[method], batch, plan.grid,
                                        task.policy, method=method)
                except InsufficientDataError as err:
                    flagged.append((trial, spec.to_line(), method, str(err)))
                    continue
                curves.append((trial, spec.to_line(), method, curve))
    return curves, flagged


def run_trials(plan: TrialPlan, task: EvalTask, threads: int = 1) -> ResultTable:
    """Full protocol: num_retrains x num_test_resamples trials, each method
    swept over the coverage grid on every test perturbation.

    Aggregate AUC per (method, metric) averages the per-trial AUCs (equal to
    the AUC of the mean curve on a shared grid); the std is across trials.
    Flagged (insufficient data) cells are excluded from the aggregate.
    """
    _validate_disjoint(plan, task.family)
    master = np.random.default_rng(plan.seed)
    retrain_seeds = [int(master.integers(2**31 - 1)) for _ in range(plan.num_retrains)]
    resample_seeds = [[int(master.integers(2**31 - 1)) for _ in range(plan.num_test_resamples)]
                      for _ in range(plan.num_retrains)]

    table = ResultTable()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda i: _run_retrain(task, plan, i, retrain_seeds[i], resample_seeds[i]),
                range(plan.num_retrains)))
    else:
        results = [_run_retrain(task, plan, i, retrain_seeds[i], resample_seeds[i])
                   for i in range(plan.num_retrains)]
    for curves, flagged in results:
        table.curves.extend(curves)
        table.flagged.extend(flagged)

    grid = np.asarray(plan.grid, dtype=float)
    for method in METHODS:
        for metric in METRIC_NAMES:
            per_trial = {}
            for trial, _, m, curve in table.curves:
                if m != method:
                    continue
                per_trial.setdefault(trial, []).append(curve.values(metric))
            if not per_trial:
                continue
            aucs = [curve_auc(grid, np.mean(v, axis=0)) for v in per_trial.values()]
            table.aggregate.append((method, metric, float(np.mean(aucs)),
                                    float(np.std(aucs))))
    return table


def rejection_composition(g: np.ndarray, data: LabeledDataset) -> dict:
    """Accepted/rejected counts per true label; counts sum to n."""
    g = np.asarray(g, dtype=float)
    if g.shape != (data.n,):
        raise ParameterError("selection bits must align with the dataset")
    out = {}
    for label in np.unique(data.labels):
        mask = data.labels == label
        accepted = int((g[mask] == 1.0).sum())
        out[int(label)] = (accepted, int(mask.sum()) - accepted)
    return out
