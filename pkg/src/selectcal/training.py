"""Robust selector training: sample perturbations, rank the shifted datasets
by selective calibration error at the target coverage, and take loss steps on
the worst offenders.

Each optimizer step draws m perturbation functions and applies them to fresh
subsamples of the training split; the kappa worst perturbed datasets (by
binned selective calibration error, thresholded per dataset) define the
update.  The final threshold is tuned on a held-out unlabeled split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .basemodel import BaseModel, predict
from .calmetrics import BinningPolicy, binned_calibration_error
from .errors import InsufficientDataError, ParameterError, TrainingError
from .kernelcal import ScoredBatch
from .losses import LossConfig, loss_grad_scores, loss_value
from .metafeatures import FeatureExtractor, extract_batch
from .selector import (HardSelector, SoftSelector, backward, binarize, forward,
                       init_selector, sgd_step, standardization_from, threshold_rule)
from .synthdata import (LabeledDataset, PerturbationFamily, apply_perturbation,
                        sample_perturbation_batch)


@dataclass(frozen=True)
class TrainConfig:
    xi: float = 0.5
    m: int = 32
    kappa: int = 4
    sample_size: int = 1024
    epochs: int = 5
    steps_per_epoch: int = 10
    learning_rate: float = 0.05
    seed: int = 0
    use_kappa_worst: bool = True
    max_grad_norm: float = 10.0  # global SGD gradient cap; <= 0 disables

    def __post_init__(self):
        if not 0.0 < self.xi <= 1.0:
            raise ParameterError("xi must be in (0, 1]")
        if not 1 <= self.kappa <= self.m:
            raise ParameterError("need 1 <= kappa <= m")
        if self.sample_size < 2:
            raise ParameterError("sample_size must be >= 2")

    @property
    def steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (step, mean_error, topk_error, loss)

    def to_csv(self, path) -> None:
        lines = ["step,mean_error,topk_error,loss"]
        for step, mean_err, topk_err, loss in self.rows:
            lines.append(f"{step},{mean_err:.12g},{topk_err:.12g},{loss:.12g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def calibration_reduction(model: BaseModel, data: LabeledDataset) -> tuple:
    """(r, y, correct) for calibration metrics.

    Binary models use the class-1 probability against the raw label;
    multi-class models use the top-label confidence against the top-label
    correctness bit.  `correct` is the top-label correctness either way.
    """
    probs = np.atleast_2d(predict(model, data.features))
    pred = probs.argmax(axis=1)
    correct = (pred == data.labels).astype(float)
    if model.num_classes == 2:
        return probs[:, 1], data.labels.astype(float), correct
    return probs.max(axis=1), correct, correct


@dataclass
class ScoredDataset:
    """One perturbed dataset, reduced and featurized for ranking and loss."""

    meta: np.ndarray
    r: np.ndarray
    y: np.ndarray


def rank_perturbed(batchset: Sequence[ScoredDataset], soft: SoftSelector,
                   xi: float, policy: BinningPolicy) -> list:
    """(index, error) pairs sorted by descending selective calibration error.

    Each dataset gets its own threshold at coverage xi over its selector
    scores.  Datasets with too little selected data rank with an infinite
    sentinel error.  Ties break by dataset index ascending.
    """
    entries = []
    for i, ds in enumerate(batchset):
        scores, _ = forward(soft, ds.meta)
        tau = threshold_rule(xi, scores)
        g = (scores >= tau).astype(float)
        try:
            err = binned_calibration_error(ScoredBatch(ds.r, ds.y, g), 2, policy)
        except InsufficientDataError:
            err = float("inf")
        entries.append((i, err))
    return sorted(entries, key=lambda item: (-item[1], item[0]))


def train(model: BaseModel, extractor: FeatureExtractor,
          train_data: LabeledDataset, tune_data: LabeledDataset,
          family: PerturbationFamily, cfg: TrainConfig,
          loss_cfg: Optional[LossConfig] = None,
          policy: BinningPolicy = BinningPolicy()) -> tuple:
    """Run the robust training loop; returns (HardSelector, TrainReport).

    train_data must be distinct from whatever fit `model` (documented
    contract, not enforced); tune_data is used unlabeled.
    """
    loss_cfg = loss_cfg or LossConfig()
    master = np.random.default_rng(cfg.seed)
    init_seed = int(master.integers(2**31 - 1))
    stats_seed = int(master.integers(2**31 - 1))

    stats_rng = np.random.default_rng(stats_seed)
    stats_n = min(4096, train_data.n)
    stats_idx = stats_rng.choice(train_data.n, size=stats_n, replace=False)
    stats_meta = extract_batch(extractor, model, train_data.features[stats_idx])
    mean, std = standardization_from(stats_meta)

    sel = init_selector(stats_meta.shape[1], init_seed, mean, std)
    report = TrainReport()

    for step in range(cfg.steps):
        perturb_seed = int(master.integers(2**31 - 1))
        draw_rng = np.random.default_rng(int(master.integers(2**31 - 1)))
        specs = sample_perturbation_batch(family, cfg.m, perturb_seed)

        datasets = []
        sizes = []
        all_feats = []
        for t in specs:
            replace = train_data.n < cfg.sample_size
            idx = draw_rng.choice(train_data.n, size=cfg.sample_size, replace=replace)
            shifted = apply_perturbation(train_data.subset(idx), t)
            datasets.append(shifted)
            sizes.append(shifted.n)
            all_feats.append(shifted.features)

        # One batched extraction across the m datasets keeps the per-step
        # cost dominated by a few large array ops.
        meta_all = extract_batch(extractor, model, np.vstack(all_feats))
        scored = []
        offset = 0
        for shifted, size in zip(datasets, sizes):
            r, y, _ = calibration_reduction(model, shifted)
            scored.append(ScoredDataset(meta=meta_all[offset:offset + size], r=r, y=y))
            offset += size

        ranked = rank_perturbed(scored, sel, cfg.xi, policy)
        errors = np.array([err for _, err in ranked])
        chosen = [i for i, _ in ranked[:cfg.kappa]] if cfg.use_kappa_worst \
            else [i for i, _ in ranked]
        topk_err = float(np.mean([err for _, err in ranked[:cfg.kappa]]))
        mean_err = float(errors.mean())

        total_grads = None
        total_loss = 0.0
        for i in chosen:
            ds = scored[i]
            scores, cache = forward(sel, ds.meta)
            batch = ScoredBatch(ds.r, ds.y, scores)
            lv = loss_value(batch, loss_cfg)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss at step {step}")
            total_loss += lv
            upstream = loss_grad_scores(batch, loss_cfg) / len(chosen)
            grads = backward(sel, cache, upstream)
            if total_grads is None:
                total_grads = grads
            else:
                total_grads = [(gw + nw, gb + nb)
                               for (gw, gb), (nw, nb) in zip(total_grads, grads)]
        if cfg.max_grad_norm > 0:
            norm = math.sqrt(sum(float((gw**2).sum() + (gb**2).sum())
                                 for gw, gb in total_grads))
            if norm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / norm
                total_grads = [(gw * scale, gb * scale) for gw, gb in total_grads]
        sgd_step(sel, total_grads, cfg.learning_rate)
        report.rows.append((step, mean_err, topk_err, total_loss / len(chosen)))

    tune_meta = extract_batch(extractor, model, tune_data.features)
    tune_scores, _ = forward(sel, tune_meta)
    hard = binarize(sel, tune_scores, cfg.xi)
    return hard, report


def oracle_selector(cond: Callable[[np.ndarray], np.ndarray], model: BaseModel,
                    xi: float, data: LabeledDataset) -> np.ndarray:
    """Selection bits from the true per-example conditional: keep the
    examples whose pointwise calibration gap h = |E[Y|X=x] - r| falls below
    the xi-quantile of h over the data."""
    if not 0.0 < xi <= 1.0:
        raise ParameterError("xi must be in (0, 1]")
    r, _, _ = calibration_reduction(model, data)
    h = np.abs(np.asarray(cond(data.features), dtype=float) - r)
    k = math.ceil(xi * data.n)
    lam = np.sort(h)[k - 1]
    return (h <= lam).astype(float)
