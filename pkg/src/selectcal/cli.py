"""Command-line surface: generate data, train a selector, evaluate methods.

Runs are driven by a flat UTF-8 ``key=value`` config file (``#`` starts a
comment).  Unknown keys are rejected; every path named in the config must
resolve at parse time.  All data goes to files under ``--out``; diagnostics
go to stderr; the exit code is 0 exactly when no error occurred.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import basemodel, metafeatures, selector as selmod
from .basemodel import ArchConfig, analytic_toy_model, fit_temperature, train_base
from .calmetrics import BinningPolicy
from .errors import ParameterError
from .harness import EvalTask, TrialPlan, run_trials
from .kernelcal import KernelSpec
from .losses import LossConfig
from .metafeatures import ExtractorConfig, extract_batch, fit_extractor
from .selector import HardSelector, forward
from .synthdata import (LabeledDataset, MixtureSpec, PerturbationFamily, ToySpec,
                        sample_mixture, sample_perturbation_batch, sample_toy)
from .training import TrainConfig, train

# (parser, default) per key; None default means "required if used".
_SCHEMA = {
    "task": (str, "toy"),
    "seed": (int, 0),
    "n_train": (int, 8192),
    "n_tune": (int, 2000),
    "n_test": (int, 10000),
    "toy_mix": (float, 0.5),
    "toy_delta": (float, 0.3),
    "mixture_classes": (int, 3),
    "mixture_dim": (int, 4),
    "mixture_separation": (float, 2.0),
    "mixture_cov_scale": (float, 1.0),
    "base_hidden": ("int_list", (32, 32)),
    "base_epochs": (int, 30),
    "base_batch": (int, 64),
    "base_lr": (float, 0.1),
    "base_model": ("path", None),
    "sigma": (float, 0.2),
    "q": (float, 2.0),
    "lambda1": (float, 1024.0),
    "lambda2": (float, 1e-3),
    "kappa": (int, 4),
    "m": (int, 32),
    "sample_size": (int, 1024),
    "xi": (float, 0.5),
    "epochs": (int, 5),
    "steps_per_epoch": (int, 10),
    "learning_rate": (float, 0.05),
    "use_kappa_worst": ("bool", True),
    "features": ("str_list", ("confidence", "onehot", "distribution", "kde", "iforest", "knn", "raw")),
    "knn_k": (int, 10),
    "iforest_trees": (int, 100),
    "iforest_subsample": (int, 256),
    "store_max": (int, 1024),
    "grid": ("grid", tuple(round(0.05 * k, 2) for k in range(1, 21))),
    "max_bins": (int, 15),
    "min_per_bin": (int, 25),
    "train_perturbations": ("str_list", ("feature_noise", "group_resample")),
    "eval_perturbations": ("str_list", ("rotation", "mean_shift", "feature_scale")),
    "train_feature_noise_range": ("float_pair", (0.0, 1.0)),
    "train_feature_scale_range": ("float_pair", (0.5, 2.0)),
    "train_rotation_range": ("float_pair", (0.0, math.pi / 4)),
    "train_mean_shift_range": ("float_pair", (0.0, 2.0)),
    "eval_feature_noise_range": ("float_pair", (0.0, 1.0)),
    "eval_feature_scale_range": ("float_pair", (0.5, 2.0)),
    "eval_rotation_range": ("float_pair", (0.0, math.pi / 4)),
    "eval_mean_shift_range": ("float_pair", (0.0, 2.0)),
    "num_retrains": (int, 5),
    "num_test_resamples": (int, 5),
    "eval_num_perturbations": (int, 3),
    "data_dir": ("path", None),
    "selector": ("path", None),
    "extractor": ("path", None),
}

_STAGES = {"train_data": 0, "tune_data": 1, "test_data": 2, "base": 3,
           "extractor": 4, "selector": 5, "eval_specs": 6, "plan": 7}


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence((seed, _STAGES[stage])).generate_state(1)[0] % (2**31 - 1))


def _parse_value(key: str, raw: str):
    kind, _ = _SCHEMA[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(","))
        if kind == "str_list":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind == "float_pair":
            lo, hi = (float(v) for v in raw.split(","))
            return (lo, hi)
        if kind == "grid":
            if ":" in raw:
                start, stop, step = (float(v) for v in raw.split(":"))
                count = int(round((stop - start) / step)) + 1
                return tuple(round(start + k * step, 10) for k in range(count))
            return tuple(float(v) for v in raw.split(","))
        if kind == "path":
            path = os.path.abspath(raw)
            if not os.path.exists(path):
                raise ParameterError(f"config key {key!r}: path {raw!r} does not resolve")
            return path
    except ParameterError:
        raise
    except ValueError as err:
        raise ParameterError(f"config key {key!r}: cannot parse value {raw!r}") from err
    raise ParameterError(f"unhandled schema kind for {key!r}")


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(path: str, seed_override=None) -> RunConfig:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParameterError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, raw = text.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _SCHEMA:
                raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    if seed_override is not None:
        values["seed"] = int(seed_override)
    if values["task"] not in ("toy", "mixture"):
        raise ParameterError(f"config key 'task': must be toy or mixture")
    return RunConfig(values)


def _mixture_spec(cfg: RunConfig) -> MixtureSpec:
    k, d = cfg["mixture_classes"], cfg["mixture_dim"]
    sep = cfg["mixture_separation"]
    means = np.zeros((k, d))
    for i in range(k):
        means[i, i % d] = sep * (1 + i // d)
    return MixtureSpec(num_classes=k, dim=d, class_means=tuple(map(tuple, means)),
                       class_covariance_scale=cfg["mixture_cov_scale"])


def load_datasets(cfg: RunConfig) -> tuple:
    """(train, tune, test) from data_dir CSVs when given, else synthesized."""
    if cfg["data_dir"]:
        k = 2 if cfg["task"] == "toy" else cfg["mixture_classes"]
        group_col = 1 if cfg["task"] == "toy" else None
        out = []
        for split in ("train", "tune", "test"):
            path = os.path.join(cfg["data_dir"], f"{split}.csv")
            if not os.path.exists(path):
                raise ParameterError(f"data_dir is missing {split}.csv")
            out.append(LabeledDataset.from_csv(path, num_classes=k, group_column=group_col))
        return tuple(out)
    seed = cfg["seed"]
    sizes = (cfg["n_train"], cfg["n_tune"], cfg["n_test"])
    stages = ("train_data", "tune_data", "test_data")
    if cfg["task"] == "toy":
        spec = ToySpec(mix=cfg["toy_mix"], delta=cfg["toy_delta"])
        return tuple(sample_toy(spec, n, stage_seed(seed, st)) for n, st in zip(sizes, stages))
    spec = _mixture_spec(cfg)
    return tuple(sample_mixture(spec, n, stage_seed(seed, st)) for n, st in zip(sizes, stages))


def _family(cfg: RunConfig, prefix: str) -> PerturbationFamily:
    kinds = cfg[f"{prefix}_perturbations"]
    ranges = {}
    for kind in kinds:
        key = f"{prefix}_{kind}_range"
        if key in cfg.values:
            ranges[kind] = cfg[key]
    groups = 2 if cfg["task"] == "toy" else cfg["mixture_classes"]
    return PerturbationFamily(kinds=tuple(kinds), intensity_ranges=ranges, num_groups=groups)


def build_base_model(cfg: RunConfig, train_data, tune_data):
    if cfg["base_model"]:
        return basemodel.load_model(cfg["base_model"])
    if cfg["task"] == "toy":
        return analytic_toy_model()
    arch = ArchConfig(hidden_sizes=cfg["base_hidden"], epochs=cfg["base_epochs"],
                      batch_size=cfg["base_batch"], learning_rate=cfg["base_lr"])
    model = train_base(train_data, arch, stage_seed(cfg["seed"], "base"))
    return fit_temperature(model, tune_data)


def build_extractor(cfg: RunConfig, model, train_data):
    exc = ExtractorConfig(include=cfg["features"], knn_k=cfg["knn_k"],
                          iforest_trees=cfg["iforest_trees"],
                          iforest_subsample=cfg["iforest_subsample"],
                          store_max=cfg["store_max"])
    reps = basemodel.hidden(model, train_data.features)
    return fit_extractor(reps, exc, stage_seed(cfg["seed"], "extractor"))


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(xi=cfg["xi"], m=cfg["m"], kappa=cfg["kappa"],
                       sample_size=cfg["sample_size"], epochs=cfg["epochs"],
                       steps_per_epoch=cfg["steps_per_epoch"],
                       learning_rate=cfg["learning_rate"],
                       seed=stage_seed(cfg["seed"], "selector"),
                       use_kappa_worst=cfg["use_kappa_worst"])


def _loss_cfg(cfg: RunConfig) -> LossConfig:
    return LossConfig(q=cfg["q"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"],
                      kernel=KernelSpec(sigma=cfg["sigma"]))


def cmd_gen(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    train_d, tune_d, test_d = load_datasets(cfg)
    for name, data in (("train", train_d), ("tune", tune_d), ("test", test_d)):
        path = os.path.join(out_dir, f"{name}.csv")
        data.to_csv(path)
        print(f"{name}.csv: {data.n} rows")
    return 0


def cmd_train(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    train_d, tune_d, _ = load_datasets(cfg)
    model = build_base_model(cfg, train_d, tune_d)
    extractor = build_extractor(cfg, model, train_d)
    hard, report = train(model, extractor, train_d, tune_d, _family(cfg, "train"),
                         _train_cfg(cfg), _loss_cfg(cfg),
                         BinningPolicy(cfg["max_bins"], cfg["min_per_bin"]))
    basemodel.save_model(model, os.path.join(out_dir, "base_model.txt"))
    metafeatures.save_extractor(extractor, os.path.join(out_dir, "extractor.txt"))
    selmod.save_selector(hard.soft, os.path.join(out_dir, "selector.txt"), tau=hard.tau)
    report.to_csv(os.path.join(out_dir, "train_report.csv"))
    final_loss = report.rows[-1][3] if report.rows else float("nan")
    print(f"trained {len(report.rows)} steps, final loss {final_loss:.6g}, "
          f"tau {hard.tau:.6g}")
    return 0


def cmd_eval(cfg: RunConfig, out_dir: str, threads: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    train_d, tune_d, test_d = load_datasets(cfg)
    model = build_base_model(cfg, train_d, tune_d)

    fixed = None
    if cfg["selector"]:
        if not cfg["extractor"]:
            raise ParameterError("eval with a fixed selector also needs extractor=")
        extractor = metafeatures.load_extractor(cfg["extractor"])
        soft, tau = selmod.load_selector(cfg["selector"])
        if tau is None:
            raise ParameterError("selector file has no tuned threshold")
        fixed = HardSelector(soft=soft, tau=tau)
    else:
        extractor = build_extractor(cfg, model, train_d)

    specs = sample_perturbation_batch(_family(cfg, "eval"), cfg["eval_num_perturbations"],
                                      stage_seed(cfg["seed"], "eval_specs"))
    plan = TrialPlan(test_perturbations=tuple(specs),
                     num_retrains=1 if fixed is not None else cfg["num_retrains"],
                     num_test_resamples=cfg["num_test_resamples"],
                     grid=cfg["grid"], seed=stage_seed(cfg["seed"], "plan"))
    task = EvalTask(model=model, extractor=extractor, train_data=train_d,
                    tune_data=tune_d, test_data=test_d, family=_family(cfg, "train"),
                    train_cfg=_train_cfg(cfg), loss_cfg=_loss_cfg(cfg),
                    policy=BinningPolicy(cfg["max_bins"], cfg["min_per_bin"]),
                    fixed_selector=fixed)
    table = run_trials(plan, task, threads=threads)
    table.write_curves_csv(os.path.join(out_dir, "curves.csv"))
    table.write_auc_csv(os.path.join(out_dir, "aucs.csv"))
    print(f"wrote {len(table.curves)} curves, {len(table.flagged)} flagged cells")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="selectcal")
    parser.add_argument("command", choices=["gen", "train", "eval"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=".")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, seed_override=args.seed)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        return cmd_eval(cfg, args.out, threads=max(1, args.threads))
    except Exception as err:  # noqa: BLE001 - single reporting point for the CLI
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
