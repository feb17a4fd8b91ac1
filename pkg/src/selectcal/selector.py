"""Soft selector network and its coverage-threshold binarization.

The selector is a 3-affine-layer ReLU network with 64-wide hidden states and
a sigmoid output; inputs are standardized meta features.  Training code uses
the explicit `forward` (with activation cache) and `backward` pair; the
threshold rule picks the largest cutoff that keeps at least a target
fraction of a held-out score set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ModelStateError, ParameterError

HIDDEN_WIDTH = 64

# Standardized inputs are clipped to this many units.  Density features are
# unbounded on far out-of-distribution points (log-density can reach -1e2s);
# saturating them keeps the "way off distribution" signal while bounding
# every activation.  Clipping the input does not disturb parameter
# gradients: the input is a constant with respect to the weights.
INPUT_CLIP = 4.0


@dataclass
class SoftSelector:
    input_dim: int
    layers: list  # [(W, b)] with W of shape (out, in)
    standardize_mean: np.ndarray
    standardize_std: np.ndarray

    def copy(self) -> "SoftSelector":
        return SoftSelector(
            input_dim=self.input_dim,
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            standardize_mean=self.standardize_mean.copy(),
            standardize_std=self.standardize_std.copy(),
        )


@dataclass
class ForwardCache:
    x_std: np.ndarray
    pre: list    # pre-activations per affine layer
    post: list   # post-ReLU activations for the hidden layers
    scores: np.ndarray


@dataclass
class HardSelector:
    soft: SoftSelector
    tau: float

    def select_scores(self, scores: np.ndarray) -> np.ndarray:
        return (np.asarray(scores, dtype=float) >= self.tau).astype(float)

    def select(self, meta: np.ndarray) -> np.ndarray:
        return self.select_scores(forward(self.soft, meta)[0])


def init_selector(input_dim: int, seed: int,
                  standardize_mean: Optional[np.ndarray] = None,
                  standardize_std: Optional[np.ndarray] = None) -> SoftSelector:
    """Seeded uniform init in +/- sqrt(6 / (fan_in + fan_out)); the output
    bias starts at +2 so initial scores sit near 0.88, away from collapse."""
    if input_dim < 1:
        raise ParameterError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    layers[-1][1][0] = 2.0
    mean = np.zeros(input_dim) if standardize_mean is None else np.asarray(standardize_mean, float)
    std = np.ones(input_dim) if standardize_std is None else np.asarray(standardize_std, float)
    if mean.shape != (input_dim,) or std.shape != (input_dim,):
        raise ParameterError("standardization statistics must match input_dim")
    return SoftSelector(input_dim=input_dim, layers=layers,
                        standardize_mean=mean, standardize_std=np.maximum(std, 1e-12))


def standardization_from(meta: np.ndarray) -> tuple:
    meta = np.atleast_2d(meta)
    return meta.mean(axis=0), np.maximum(meta.std(axis=0), 1e-12)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(sel: SoftSelector, meta: np.ndarray) -> tuple:
    """Scores in (0, 1) for a batch of meta vectors, plus the activation
    cache needed by `backward`."""
    x = np.atleast_2d(np.asarray(meta, dtype=float))
    if x.shape[1] != sel.input_dim:
        raise ParameterError(f"expected input dim {sel.input_dim}, got {x.shape[1]}")
    x_std = np.clip((x - sel.standardize_mean) / sel.standardize_std,
                    -INPUT_CLIP, INPUT_CLIP)
    pre, post = [], []
    h = x_std
    for w, b in sel.layers[:-1]:
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        post.append(h)
    w, b = sel.layers[-1]
    z = h @ w.T + b
    pre.append(z)
    scores = _sigmoid(z[:, 0])
    return scores, ForwardCache(x_std=x_std, pre=pre, post=post, scores=scores)


def backward(sel: SoftSelector, cache: ForwardCache, upstream: np.ndarray) -> list:
    """Exact reverse-mode gradients of sum_i upstream_i * score_i with
    respect to every affine parameter."""
    if cache is None:
        raise ModelStateError("forward cache required for backward")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache.scores.shape:
        raise ParameterError("upstream gradient must be one value per example")
    s = cache.scores
    dz = (upstream * s * (1.0 - s))[:, None]
    grads = [None] * len(sel.layers)
    for li in range(len(sel.layers) - 1, -1, -1):
        a_in = cache.x_std if li == 0 else cache.post[li - 1]
        grads[li] = (dz.T @ a_in, dz.sum(axis=0))
        if li > 0:
            w, _ = sel.layers[li]
            dz = (dz @ w) * (cache.pre[li - 1] > 0)
    return grads


def sgd_step(sel: SoftSelector, grads: list, learning_rate: float) -> None:
    for li, (gw, gb) in enumerate(grads):
        w, b = sel.layers[li]
        sel.layers[li] = (w - learning_rate * gw, b - learning_rate * gb)


def threshold_rule(xi: float, scores: Sequence[float]) -> float:
    """Largest cutoff keeping at least a xi-fraction of the scores: the
    ceil(xi * n)-th largest score."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ParameterError("scores must be non-empty")
    if not 0.0 < xi <= 1.0:
        raise ParameterError(f"coverage target must be in (0, 1], got {xi}")
    k = math.ceil(xi * scores.size)
    return float(np.sort(scores)[scores.size - k])


def binarize(sel: SoftSelector, tune_scores: Sequence[float], xi: float) -> HardSelector:
    """Hard selector with the threshold tuned on held-out unlabeled scores."""
    return HardSelector(soft=sel, tau=threshold_rule(xi, tune_scores))


def save_selector(sel: SoftSelector, path, tau: Optional[float] = None) -> None:
    """Shared text model format with kind tag `selector`, then an optional
    `tau` line and the input standardization statistics."""
    lines = [f"selector {sel.input_dim} 1"]
    for w, b in sel.layers:
        rows, cols = w.shape
        lines.append(f"{rows} {cols}")
        for r in range(rows):
            lines.append(" ".join(f"{v:.17g}" for v in w[r]))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    if tau is not None:
        lines.append(f"tau {tau:.17g}")
    lines.append("standardize_mean " + " ".join(f"{v:.17g}" for v in sel.standardize_mean))
    lines.append("standardize_std " + " ".join(f"{v:.17g}" for v in sel.standardize_std))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_selector(path) -> tuple:
    """Returns (SoftSelector, tau or None)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    head = lines[0].split()
    if head[0] != "selector":
        raise ParameterError(f"{path} is not a selector file")
    input_dim = int(head[1])
    layers = []
    pos = 1
    while pos < len(lines) and lines[pos][0].isdigit():
        rows, cols = (int(v) for v in lines[pos].split())
        pos += 1
        w = np.array([[float(v) for v in lines[pos + r].split()] for r in range(rows)])
        pos += rows
        b = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        layers.append((w.reshape(rows, cols), b))
    tau = None
    mean = std = None
    while pos < len(lines):
        key, _, rest = lines[pos].partition(" ")
        if key == "tau":
            tau = float(rest)
        elif key == "standardize_mean":
            mean = np.array([float(v) for v in rest.split()])
        elif key == "standardize_std":
            std = np.array([float(v) for v in rest.split()])
        pos += 1
    sel = SoftSelector(input_dim=input_dim, layers=layers,
                       standardize_mean=mean, standardize_std=std)
    return sel, tau
