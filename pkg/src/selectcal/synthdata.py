"""Synthetic labeled distributions and the perturbation family used to simulate shift.

Two tasks are provided:

* a two-feature binary task where X1 ~ Unif(0,1) carries the signal and the
  binary flag X2 marks whether the conditional P(Y=1 | X) is exactly X1
  (X2 = 1) or offset by a fixed amount delta (X2 = 0).  The offset branch is
  the "untrustworthy" stratum a selector should learn to reject;
* a Gaussian-mixture multi-class task for exercising a trained base network.

Perturbations act on whole datasets and never mutate their input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterError

PERTURBATION_KINDS = (
    "feature_noise",
    "feature_scale",
    "rotation",
    "mean_shift",
    "group_resample",
)

# Default legal intensity range per kind.  group_resample's intensity is a
# derived summary (the largest group weight); resampling itself is driven by
# the group_weights vector.
DEFAULT_INTENSITY_RANGES = {
    "feature_noise": (0.0, 1.0),
    "feature_scale": (0.5, 2.0),
    "rotation": (0.0, math.pi / 4),
    "mean_shift": (0.0, 2.0),
    "group_resample": (0.0, 1.0),
}


@dataclass(frozen=True)
class ToySpec:
    """Two-feature binary task: X1 ~ Unif(0,1), X2 ~ Bern(mix).

    Y ~ Bern(X1) on the X2=1 branch and Bern(min(X1 + delta, 1)) on the
    X2=0 branch, so delta controls how miscalibrated the confidence X1 is
    on the flagged stratum.
    """

    mix: float = 0.5
    delta: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.mix < 1.0:
            raise ParameterError(f"mix must be in (0, 1), got {self.mix}")
        if not 0.0 < self.delta <= 1.0:
            raise ParameterError(f"delta must be in (0, 1], got {self.delta}")


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture classification task."""

    num_classes: int
    dim: int
    class_means: tuple
    class_covariance_scale: float = 1.0
    class_priors: Optional[tuple] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.dim < 1:
            raise ParameterError("dim must be >= 1")
        means = np.asarray(self.class_means, dtype=float)
        if means.shape != (self.num_classes, self.dim):
            raise ParameterError(
                f"class_means must be {self.num_classes} vectors of dim {self.dim}, "
                f"got shape {means.shape}"
            )
        if self.class_covariance_scale < 0:
            raise ParameterError("class_covariance_scale must be >= 0")
        if self.class_priors is not None:
            priors = np.asarray(self.class_priors, dtype=float)
            if priors.shape != (self.num_classes,):
                raise ParameterError("one prior per class required")
            if abs(priors.sum() - 1.0) > 1e-12 or (priors < 0).any():
                raise ParameterError("class_priors must be a probability vector")

    def means(self) -> np.ndarray:
        return np.asarray(self.class_means, dtype=float)

    def priors(self) -> np.ndarray:
        if self.class_priors is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_priors, dtype=float)


@dataclass(frozen=True)
class PerturbationSpec:
    """One sampled shift function: kind, intensity, and its own seed."""

    kind: str
    intensity: float
    seed: int
    group_weights: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ParameterError(f"unknown perturbation kind {self.kind!r}")
        lo, hi = DEFAULT_INTENSITY_RANGES[self.kind]
        if not (lo <= self.intensity <= hi) or not math.isfinite(self.intensity):
            raise ParameterError(
                f"intensity {self.intensity} outside legal range [{lo}, {hi}] for {self.kind}"
            )
        if self.group_weights is not None:
            w = np.asarray(self.group_weights, dtype=float)
            if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
                raise ParameterError("group_weights must be a probability vector")

    def to_line(self) -> str:
        """Single config-style line: ``kind=...;intensity=...;seed=...``."""
        parts = [f"kind={self.kind}", f"intensity={self.intensity:.12g}", f"seed={self.seed}"]
        if self.group_weights is not None:
            parts.append("group_weights=" + ",".join(f"{w:.12g}" for w in self.group_weights))
        return ";".join(parts)

    @staticmethod
    def from_line(line: str) -> "PerturbationSpec":
        fields = {}
        for item in line.strip().split(";"):
            key, _, value = item.partition("=")
            fields[key.strip()] = value.strip()
        weights = None
        if "group_weights" in fields:
            weights = tuple(float(w) for w in fields["group_weights"].split(","))
        return PerturbationSpec(
            kind=fields["kind"],
            intensity=float(fields["intensity"]),
            seed=int(fields["seed"]),
            group_weights=weights,
        )


@dataclass
class LabeledDataset:
    """Feature matrix plus integer labels and a provenance tag.

    ``groups`` carries the resampling stratum of each row (the X2 flag for
    the two-feature task, the class label for the mixture task) so that
    group_resample perturbations know what to reweight.
    """

    features: np.ndarray
    labels: np.ndarray
    provenance: str = "clean"
    perturbation: Optional[PerturbationSpec] = None
    groups: Optional[np.ndarray] = None
    num_classes: int = 2

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ParameterError("features must be a non-empty n x d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("labels must be one integer per row")
        if not np.isfinite(self.features).all():
            raise ParameterError("feature rows must be finite")
        if (self.labels < 0).any() or (self.labels >= self.num_classes).any():
            raise ParameterError("labels out of range")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=int)
            if self.groups.shape != self.labels.shape:
                raise ParameterError("groups must align with rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            provenance=self.provenance,
            perturbation=self.perturbation,
            groups=None if self.groups is None else self.groups[idx],
            num_classes=self.num_classes,
        )

    def to_csv(self, path) -> None:
        """UTF-8 CSV with header x0,...,x{d-1},y; decimal floats, integer label."""
        d = self.dim
        header = ",".join([f"x{j}" for j in range(d)] + ["y"])
        lines = [header]
        for i in range(self.n):
            row = ",".join(f"{v:.12g}" for v in self.features[i])
            lines.append(f"{row},{self.labels[i]}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path, num_classes: Optional[int] = None, group_column: Optional[int] = None) -> "LabeledDataset":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[-1] != "y" or not all(h == f"x{j}" for j, h in enumerate(header[:-1])):
                raise ParameterError(f"unexpected CSV header in {path}")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        feats = np.array([[float(v) for v in row[:-1]] for row in rows])
        labels = np.array([int(row[-1]) for row in rows])
        k = num_classes if num_classes is not None else int(labels.max()) + 1
        groups = None
        if group_column is not None:
            groups = feats[:, group_column].round().astype(int)
        elif k >= 2:
            groups = labels.copy()
        return LabeledDataset(feats, labels, num_classes=k, groups=groups)


@dataclass(frozen=True)
class PerturbationFamily:
    """The pool of shift kinds (with intensity ranges) a sampler draws from."""

    kinds: tuple
    intensity_ranges: dict = field(default_factory=dict)
    num_groups: int = 2

    def __post_init__(self):
        if len(self.kinds) == 0:
            raise ParameterError("perturbation family needs at least one kind")
        for kind in self.kinds:
            if kind not in PERTURBATION_KINDS:
                raise ParameterError(f"unknown perturbation kind {kind!r}")
        for kind, (lo, hi) in self.intensity_ranges.items():
            dlo, dhi = DEFAULT_INTENSITY_RANGES[kind]
            if lo < dlo or hi > dhi or lo > hi:
                raise ParameterError(
                    f"intensity range [{lo}, {hi}] for {kind} outside legal [{dlo}, {dhi}]"
                )

    def range_for(self, kind: str):
        return self.intensity_ranges.get(kind, DEFAULT_INTENSITY_RANGES[kind])


def families_disjoint(train: PerturbationFamily, test: PerturbationFamily) -> bool:
    """True when no kind is shared with overlapping intensity ranges."""
    for kind in train.kinds:
        if kind in test.kinds:
            lo1, hi1 = train.range_for(kind)
            lo2, hi2 = test.range_for(kind)
            if min(hi1, hi2) > max(lo1, lo2):
                return False
    return True


def sample_toy(spec: ToySpec, n: int, seed: int) -> LabeledDataset:
    """Draw n examples of the two-feature task; deterministic given seed."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(0.0, 1.0, size=n)
    x2 = (rng.uniform(0.0, 1.0, size=n) < spec.mix).astype(float)
    p = np.where(x2 == 1.0, x1, np.minimum(x1 + spec.delta, 1.0))
    y = (rng.uniform(0.0, 1.0, size=n) < p).astype(int)
    feats = np.column_stack([x1, x2])
    return LabeledDataset(feats, y, groups=x2.astype(int), num_classes=2)


def toy_conditional(spec: ToySpec) -> Callable[[np.ndarray], np.ndarray]:
    """Per-example true conditional P(Y=1 | X=x) for the two-feature task."""

    def cond(features: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(features, dtype=float))
        x1, x2 = feats[:, 0], feats[:, 1]
        return np.where(x2 == 1.0, x1, np.minimum(x1 + spec.delta, 1.0))

    return cond


def toy_marginal_conditional(spec: ToySpec) -> Callable[[np.ndarray], np.ndarray]:
    """P(Y=1 | X1=r) marginalized over the branch flag, for unselected data."""

    def cond(r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return spec.mix * r + (1.0 - spec.mix) * np.minimum(r + spec.delta, 1.0)

    return cond


def sample_mixture(spec: MixtureSpec, n: int, seed: int) -> LabeledDataset:
    """Draw n examples from the Gaussian mixture; deterministic given seed."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    priors = spec.priors()
    labels = rng.choice(spec.num_classes, size=n, p=priors)
    means = spec.means()
    noise = rng.standard_normal((n, spec.dim)) * math.sqrt(spec.class_covariance_scale)
    feats = means[labels] + noise
    return LabeledDataset(feats, labels, groups=labels.copy(), num_classes=spec.num_classes)


def _rotation_matrix(dim: int, angle: float, seed: int) -> np.ndarray:
    """Rotation by `angle` in a coordinate plane (seeded choice for dim > 2)."""
    if dim < 2:
        raise ParameterError("rotation requires at least 2 feature dimensions")
    if dim == 2:
        i, j = 0, 1
    else:
        rng = np.random.default_rng(seed)
        i, j = rng.choice(dim, size=2, replace=False)
    rot = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    rot[i, i] = c
    rot[j, j] = c
    rot[i, j] = -s
    rot[j, i] = s
    return rot


def apply_perturbation(data: LabeledDataset, t: PerturbationSpec) -> LabeledDataset:
    """Return a shifted copy of `data`; the input is never mutated."""
    rng = np.random.default_rng(t.seed)
    feats = data.features
    if t.kind == "feature_noise":
        new = feats + t.intensity * rng.standard_normal(feats.shape)
        return LabeledDataset(new, data.labels.copy(), "perturbed", t,
                              None if data.groups is None else data.groups.copy(),
                              data.num_classes)
    if t.kind == "feature_scale":
        new = feats * t.intensity
        return LabeledDataset(new, data.labels.copy(), "perturbed", t,
                              None if data.groups is None else data.groups.copy(),
                              data.num_classes)
    if t.kind == "rotation":
        rot = _rotation_matrix(data.dim, t.intensity, t.seed)
        new = feats @ rot.T
        return LabeledDataset(new, data.labels.copy(), "perturbed", t,
                              None if data.groups is None else data.groups.copy(),
                              data.num_classes)
    if t.kind == "mean_shift":
        direction = rng.standard_normal(data.dim)
        direction /= np.linalg.norm(direction)
        new = feats + t.intensity * direction
        return LabeledDataset(new, data.labels.copy(), "perturbed", t,
                              None if data.groups is None else data.groups.copy(),
                              data.num_classes)
    if t.kind == "group_resample":
        if t.group_weights is None:
            raise ParameterError("group_resample requires group_weights")
        if data.groups is None:
            raise ParameterError("dataset has no group annotation to resample by")
        weights = np.asarray(t.group_weights, dtype=float)
        group_ids = np.unique(data.groups)
        if len(weights) != len(group_ids):
            raise ParameterError(
                f"got {len(weights)} group weights for {len(group_ids)} groups"
            )
        # Sample a group per output row, then a uniform member of that group.
        # Size is preserved; rows are drawn with replacement.
        chosen = rng.choice(len(group_ids), size=data.n, p=weights)
        members = {g: np.flatnonzero(data.groups == gid) for g, gid in enumerate(group_ids)}
        for g, gid in enumerate(group_ids):
            if weights[g] > 0 and len(members[g]) == 0:
                raise ParameterError(f"group {gid} has positive weight but no members")
        idx = np.empty(data.n, dtype=int)
        for g in range(len(group_ids)):
            mask = chosen == g
            if mask.any():
                idx[mask] = rng.choice(members[g], size=int(mask.sum()), replace=True)
        out = data.subset(idx)
        out.provenance = "perturbed"
        out.perturbation = t
        return out
    raise ParameterError(f"unknown perturbation kind {t.kind!r}")


def sample_perturbation_batch(family: PerturbationFamily, m: int, seed: int) -> list:
    """Draw m perturbation specs with kinds and intensities from the family."""
    if m < 1:
        raise ParameterError("m must be >= 1")
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(m):
        kind = family.kinds[rng.integers(len(family.kinds))]
        child_seed = int(rng.integers(0, 2**31 - 1))
        if kind == "group_resample":
            weights = rng.dirichlet(np.ones(family.num_groups))
            specs.append(PerturbationSpec(kind, float(weights.max()), child_seed,
                                          tuple(float(w) for w in weights)))
        else:
            lo, hi = family.range_for(kind)
            intensity = float(rng.uniform(lo, hi))
            specs.append(PerturbationSpec(kind, intensity, child_seed))
    return specs
