"""The fixed confidence model: analytic for the two-feature task, or a small
trained-and-frozen feed-forward classifier, plus temperature scaling.

The model is treated as a black box downstream; only `predict` and `hidden`
are consumed by the selector machinery.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ParameterError, TrainingError
from .synthdata import LabeledDataset


@dataclass(frozen=True)
class ArchConfig:
    hidden_sizes: tuple = (32, 32)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1


@dataclass(frozen=True)
class BaseModel:
    """Frozen confidence model.

    kind 'analytic_toy' reads its confidence straight off the first feature;
    kind 'trained_net' is a ReLU stack ending in K logits.  Temperature
    rescales logits at prediction time and never changes the argmax.
    """

    kind: str
    num_classes: int
    layers: tuple = ()  # ((W, b), ...) with W of shape (out, in)
    temperature: float = 1.0
    input_dim: int = 2
    loss_history: tuple = ()

    def __post_init__(self):
        if self.kind not in ("analytic_toy", "trained_net"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")


def analytic_toy_model() -> BaseModel:
    """The given confidence model for the two-feature task: P(Y=1 | x) = x1."""
    return BaseModel(kind="analytic_toy", num_classes=2, input_dim=2)


def _as_batch(x: np.ndarray, dim: int) -> tuple:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != dim:
        raise ParameterError(f"expected feature dimension {dim}, got {arr.shape[1]}")
    return arr, single


def _forward_net(model: BaseModel, x: np.ndarray) -> tuple:
    """Returns (logits, last hidden activation)."""
    h = x
    for w, b in model.layers[:-1]:
        h = np.maximum(h @ w.T + b, 0.0)
    w, b = model.layers[-1]
    return h @ w.T + b, h


def logits(model: BaseModel, x: np.ndarray) -> np.ndarray:
    arr, single = _as_batch(x, model.input_dim)
    if model.kind == "analytic_toy":
        r = np.clip(arr[:, 0], 0.0, 1.0)
        with np.errstate(divide="ignore"):
            out = np.column_stack([np.log(1.0 - r), np.log(r)])
    else:
        out, _ = _forward_net(model, arr)
    return out[0] if single else out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    # -inf logits (probability exactly zero) turn into nan after the shift
    # when the max itself is -inf; that cannot happen here since at most
    # one of the two analytic logits is -inf.
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: BaseModel, x: np.ndarray) -> np.ndarray:
    """Probability vector(s) over the K classes, temperature applied."""
    z = logits(model, x)
    return _softmax(np.atleast_2d(z) / model.temperature)[0] if z.ndim == 1 \
        else _softmax(z / model.temperature)


def hidden(model: BaseModel, x: np.ndarray) -> np.ndarray:
    """Representation used by meta features: last hidden activation, or the
    raw features for the analytic model."""
    arr, single = _as_batch(x, model.input_dim)
    if model.kind == "analytic_toy":
        out = arr
    else:
        _, out = _forward_net(model, arr)
    return out[0] if single else out


def _init_layers(input_dim: int, hidden_sizes: tuple, num_classes: int,
                 rng: np.random.Generator) -> tuple:
    sizes = [input_dim, *hidden_sizes, num_classes]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(fan_out)
        layers.append((w, b))
    return tuple(layers)


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    return float(-np.log(p).mean())


def train_base(data: LabeledDataset, arch: ArchConfig, seed: int) -> BaseModel:
    """Fit a small feed-forward classifier by mini-batch SGD on cross-entropy.

    The returned model is frozen; per-epoch full-data loss is kept on
    ``loss_history`` for diagnostics.
    """
    classes = np.unique(data.labels)
    if len(classes) < 2:
        raise TrainingError("training data must contain at least 2 classes")
    k = data.num_classes
    rng = np.random.default_rng(seed)
    layers = [list(lw) for lw in _init_layers(data.dim, arch.hidden_sizes, k, rng)]
    x_all, y_all = data.features, data.labels
    history = []

    def full_forward(params, x):
        acts = [x]
        h = x
        for w, b in params[:-1]:
            h = np.maximum(h @ w.T + b, 0.0)
            acts.append(h)
        w, b = params[-1]
        return h @ w.T + b, acts

    for _ in range(arch.epochs):
        order = rng.permutation(data.n)
        for start in range(0, data.n, arch.batch_size):
            idx = order[start:start + arch.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            z, acts = full_forward(layers, xb)
            p = _softmax(z)
            dz = p.copy()
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            for li in range(len(layers) - 1, -1, -1):
                w, b = layers[li]
                a_in = acts[li]
                gw = dz.T @ a_in
                gb = dz.sum(axis=0)
                if li > 0:
                    dz = (dz @ w) * (acts[li] > 0)
                layers[li][0] = w - arch.learning_rate * gw
                layers[li][1] = b - arch.learning_rate * gb
        z, _ = full_forward(layers, x_all)
        history.append(_cross_entropy(_softmax(z), y_all))

    return BaseModel(
        kind="trained_net",
        num_classes=k,
        layers=tuple((w.copy(), b.copy()) for w, b in layers),
        temperature=1.0,
        input_dim=data.dim,
        loss_history=tuple(history),
    )


def _nll_at_temperature(zs: np.ndarray, labels: np.ndarray, t: float) -> float:
    return _cross_entropy(_softmax(zs / t), labels)


def fit_temperature(model: BaseModel, validation: LabeledDataset,
                    lo: float = 0.05, hi: float = 20.0) -> BaseModel:
    """Pick the temperature minimizing validation NLL.

    Grid of 50 log-spaced points, then 3 rounds of local refinement around
    the running best.  Weights are untouched; argmax predictions are
    temperature-invariant by construction.
    """
    if validation.n < 1:
        raise ParameterError("validation data must be non-empty")
    if len(np.unique(validation.labels)) < 2:
        warnings.warn("validation data has a single class; temperature left unchanged")
        return model
    zs = logits(model, validation.features)
    grid = np.geomspace(lo, hi, 50)
    for _ in range(4):  # initial grid + 3 refinements
        losses = [_nll_at_temperature(zs, validation.labels, t) for t in grid]
        best = int(np.argmin(losses))
        left = grid[max(best - 1, 0)]
        right = grid[min(best + 1, len(grid) - 1)]
        grid = np.geomspace(left, right, 20)
    best_t = float(grid[np.argmin([_nll_at_temperature(zs, validation.labels, t) for t in grid])])
    return replace(model, temperature=best_t)


def save_model(model: BaseModel, path) -> None:
    """Text format: line 1 `kind K temperature`, then per-layer blocks of
    `rows cols`, the weight rows, and one bias line."""
    lines = [f"{model.kind} {model.num_classes} {model.temperature:.12g}"]
    for w, b in model.layers:
        rows, cols = w.shape
        lines.append(f"{rows} {cols}")
        for r in range(rows):
            lines.append(" ".join(f"{v:.17g}" for v in w[r]))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> BaseModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    kind, k, temperature = lines[0].split()
    layers = []
    pos = 1
    while pos < len(lines):
        rows, cols = (int(v) for v in lines[pos].split())
        pos += 1
        w = np.array([[float(v) for v in lines[pos + r].split()] for r in range(rows)])
        pos += rows
        b = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        if w.shape != (rows, cols) or b.shape != (rows,):
            raise ParameterError(f"malformed layer block in {path}")
        layers.append((w, b))
    input_dim = layers[0][0].shape[1] if layers else 2
    return BaseModel(kind=kind, num_classes=int(k), layers=tuple(layers),
                     temperature=float(temperature), input_dim=input_dim)
