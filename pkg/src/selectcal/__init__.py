"""Selective calibration toolkit.

Train a selector network that abstains on inputs whose confidence estimates
are likely miscalibrated, evaluate it against confidence/density baselines
over coverage sweeps, and stress it with simulated distribution shift.
"""

from .basemodel import (ArchConfig, BaseModel, analytic_toy_model, fit_temperature,
                        hidden, load_model, predict, save_model, train_base)
from .calmetrics import (BinningPolicy, CoverageCurve, EvalBatch, binned_calibration_error,
                         brier, curve_auc, selective_risk_and_coverage, sweep_curve)
from .errors import (DegenerateSelectionError, InsufficientDataError, ModelStateError,
                     NumericError, ParameterError, TrainingError)
from .harness import EvalTask, ResultTable, TrialPlan, rejection_composition, run_trials
from .kernelcal import (KernelSpec, ScoredBatch, empirical_mmce_sq, empirical_smmce_u,
                        kernel_eval, naive_smmce_u, plug_in_smmce)
from .losses import LossConfig, loss_grad_scores, loss_value
from .metafeatures import (ExtractorConfig, FeatureExtractor, baseline_scores, extract,
                           extract_batch, fit_extractor, load_extractor, save_extractor)
from .selector import (HardSelector, SoftSelector, backward, binarize, forward,
                       init_selector, load_selector, save_selector, threshold_rule)
from .synthdata import (LabeledDataset, MixtureSpec, PerturbationFamily, PerturbationSpec,
                        ToySpec, apply_perturbation, sample_mixture,
                        sample_perturbation_batch, sample_toy, toy_conditional,
                        toy_marginal_conditional)
from .training import (TrainConfig, TrainReport, calibration_reduction, oracle_selector,
                       rank_perturbed, train)

__version__ = "0.1.0"
