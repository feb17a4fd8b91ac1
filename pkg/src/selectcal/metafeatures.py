"""Per-example meta features feeding the selector network.

The vector layout is [confidence(1) | one-hot(K) | distribution(K) | kde(1) |
iforest(1) | knn(1) | representation(d, optional)], with inactive groups
omitted.  Density components (KDE log-density, isolation-forest anomaly
score, mean kNN distance) are fitted once on clean training representations
and are pure functions of the query afterwards; they double as selection
baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basemodel import BaseModel, hidden, predict
from .errors import ModelStateError, ParameterError

FEATURE_GROUPS = ("confidence", "onehot", "distribution", "kde", "iforest", "knn", "raw")

_CHUNK = 4096  # query rows per block in pairwise-distance passes


@dataclass(frozen=True)
class ExtractorConfig:
    include: tuple = ("confidence", "onehot", "distribution", "kde", "iforest", "knn")
    knn_k: int = 10
    iforest_trees: int = 100
    iforest_subsample: int = 256
    store_max: int = 512        # cap on stored representations for kde/knn
    projection_max_dim: int = 128

    def __post_init__(self):
        for group in self.include:
            if group not in FEATURE_GROUPS:
                raise ParameterError(f"unknown feature group {group!r}")
        if self.knn_k < 1:
            raise ParameterError("knn_k must be >= 1")


def harmonic(k: int) -> float:
    """Exact harmonic number H(k)."""
    if k <= 0:
        return 0.0
    return float(np.sum(1.0 / np.arange(1, k + 1)))


def average_path_normalizer(n: int) -> float:
    """Expected isolation path length c(n) of an unsuccessful BST search;
    uses exact harmonic numbers so that c(2) = 1."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def _normalizer_table(max_n: int) -> np.ndarray:
    """c(n) for n = 0..max_n in one shot."""
    table = np.zeros(max_n + 1)
    if max_n >= 2:
        ns = np.arange(2, max_n + 1, dtype=float)
        h = np.cumsum(1.0 / np.arange(1, max_n, dtype=float))  # H(1)..H(max_n-1)
        table[2:] = 2.0 * h - 2.0 * (ns - 1.0) / ns
    return table


@dataclass
class IsolationTree:
    feature: np.ndarray    # split dim per node, -1 at external nodes
    threshold: np.ndarray
    left: np.ndarray       # child indices, -1 at external nodes
    right: np.ndarray
    size: np.ndarray       # sample count reaching each node
    depth: np.ndarray
    extra: np.ndarray = None  # c(size) per node, precomputed for scoring

    def __post_init__(self):
        if self.extra is None:
            table = _normalizer_table(int(self.size.max(initial=1)))
            self.extra = table[self.size]


def _build_tree(x: np.ndarray, max_depth: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def add_node(idx: np.ndarray, d: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(len(idx))
        depth.append(d)
        sub = x[idx]
        if len(idx) <= 1 or d >= max_depth:
            return node
        spread = sub.max(axis=0) - sub.min(axis=0)
        usable = np.flatnonzero(spread > 0)
        if len(usable) == 0:
            return node
        dim = int(usable[rng.integers(len(usable))])
        lo, hi = sub[:, dim].min(), sub[:, dim].max()
        cut = float(rng.uniform(lo, hi))
        go_left = sub[:, dim] < cut
        if not go_left.any() or go_left.all():
            return node
        feature[node] = dim
        threshold[node] = cut
        left[node] = add_node(idx[go_left], d + 1)
        right[node] = add_node(idx[~go_left], d + 1)
        return node

    add_node(np.arange(len(x)), 0)
    return IsolationTree(
        feature=np.array(feature), threshold=np.array(threshold),
        left=np.array(left), right=np.array(right),
        size=np.array(size), depth=np.array(depth),
    )


def _tree_path_lengths(tree: IsolationTree, x: np.ndarray) -> np.ndarray:
    """Vectorized descent of all query rows; path length is the external
    node's depth plus c(size) for the unresolved remainder."""
    cur = np.zeros(len(x), dtype=int)
    active = np.flatnonzero(tree.feature[cur] >= 0)
    while active.size:
        nodes = cur[active]
        dims = tree.feature[nodes]
        go_left = x[active, dims] < tree.threshold[nodes]
        cur[active] = np.where(go_left, tree.left[nodes], tree.right[nodes])
        active = active[tree.feature[cur[active]] >= 0]
    return tree.depth[cur] + tree.extra[cur]


@dataclass
class FeatureExtractor:
    """Fitted meta-feature components over one training representation set."""

    config: ExtractorConfig
    store: Optional[np.ndarray] = None          # stored reps for kde/knn
    kde_bandwidths: Optional[np.ndarray] = None
    trees: tuple = ()
    projection: Optional[np.ndarray] = None     # (rep_dim, proj_dim) or None
    rep_dim: int = 0
    fitted: bool = False

    def _project(self, reps: np.ndarray) -> np.ndarray:
        if self.projection is None:
            return reps
        return reps @ self.projection

    def kde_log_density(self, reps: np.ndarray) -> np.ndarray:
        """Scalar log-density per query under the product-Gaussian KDE."""
        q = self._project(np.atleast_2d(reps))
        h = self.kde_bandwidths
        # Product of per-dim Gaussians = one Gaussian in bandwidth-scaled
        # coordinates, so a single distance matmul does all dimensions.
        qs = q / h
        ss = self.store / h
        log_norm = -0.5 * math.log(2 * math.pi) * ss.shape[1] - float(np.log(h).sum())
        ss_sq = (ss**2).sum(axis=1)
        out = np.empty(qs.shape[0])
        for start in range(0, qs.shape[0], _CHUNK):
            block = qs[start:start + _CHUNK]
            d2 = (block**2).sum(axis=1)[:, None] + ss_sq[None, :] - 2.0 * block @ ss.T
            np.maximum(d2, 0.0, out=d2)
            expo = -0.5 * d2
            mx = expo.max(axis=1, keepdims=True)
            out[start:start + _CHUNK] = mx[:, 0] + np.log(np.exp(expo - mx).mean(axis=1))
        return out + log_norm

    def iforest_score(self, reps: np.ndarray) -> np.ndarray:
        """Anomaly score in (0, 1); deeper average isolation path means a
        lower score."""
        q = self._project(np.atleast_2d(reps))
        paths = np.zeros(q.shape[0])
        for tree in self.trees:
            paths += _tree_path_lengths(tree, q)
        paths /= len(self.trees)
        c = average_path_normalizer(self.config.iforest_subsample)
        return np.power(2.0, -paths / c)

    def knn_distance(self, reps: np.ndarray) -> np.ndarray:
        """Mean Euclidean distance to the k nearest stored representations."""
        q = self._project(np.atleast_2d(reps))
        s = self.store
        k = min(self.config.knn_k, s.shape[0])
        s_sq = (s**2).sum(axis=1)
        out = np.empty(q.shape[0])
        for start in range(0, q.shape[0], _CHUNK):
            block = q[start:start + _CHUNK]
            d2 = (block**2).sum(axis=1)[:, None] + s_sq[None, :] - 2.0 * block @ s.T
            np.maximum(d2, 0.0, out=d2)
            nearest = np.partition(d2, k - 1, axis=1)[:, :k]
            out[start:start + _CHUNK] = np.sqrt(nearest).mean(axis=1)
        return out


@dataclass
class MetaVector:
    values: np.ndarray
    layout: tuple  # (group, width) pairs in order


def fit_extractor(train_reps: np.ndarray, config: ExtractorConfig, seed: int) -> FeatureExtractor:
    """Fit density components on clean training representations.

    KDE bandwidths follow a Scott-style rule (per-dimension std times
    n^(-1/(d+4))); the isolation forest uses seeded random trees; large
    representations are first sent through a seeded random orthogonal
    projection.
    """
    reps = np.asarray(train_reps, dtype=float)
    if reps.ndim != 2 or reps.shape[0] < 50:
        raise ParameterError("need at least 50 training representations")
    rng = np.random.default_rng(seed)
    rep_dim = reps.shape[1]

    projection = None
    if rep_dim > config.projection_max_dim:
        gauss = rng.standard_normal((rep_dim, config.projection_max_dim))
        qmat, _ = np.linalg.qr(gauss)
        projection = qmat

    ex = FeatureExtractor(config=config, projection=projection, rep_dim=rep_dim)
    proj = ex._project(reps)

    if reps.shape[0] > config.store_max:
        keep = rng.choice(reps.shape[0], size=config.store_max, replace=False)
        store = proj[np.sort(keep)]
    else:
        store = proj.copy()
    ex.store = store

    n, d = store.shape
    stds = store.std(axis=0)
    ex.kde_bandwidths = np.maximum(stds * n ** (-1.0 / (d + 4)), 1e-6)

    psi = min(config.iforest_subsample, proj.shape[0])
    max_depth = int(math.ceil(math.log2(max(psi, 2))))
    trees = []
    for _ in range(config.iforest_trees):
        pick = rng.choice(proj.shape[0], size=psi, replace=False)
        trees.append(_build_tree(proj[pick], max_depth, rng))
    ex.trees = tuple(trees)
    ex.fitted = True
    return ex


def _layout(config: ExtractorConfig, k: int, rep_dim: int, proj_dim: int) -> tuple:
    widths = {
        "confidence": 1, "onehot": k, "distribution": k,
        "kde": 1, "iforest": 1, "knn": 1, "raw": proj_dim,
    }
    return tuple((g, widths[g]) for g in config.include)


def extract_batch(ex: FeatureExtractor, model: BaseModel, x: np.ndarray) -> np.ndarray:
    """Meta-feature matrix for a batch of inputs (rows follow the layout)."""
    if not ex.fitted:
        raise ModelStateError("extractor has not been fitted")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    probs = np.atleast_2d(predict(model, x))
    reps = np.atleast_2d(hidden(model, x))
    k = probs.shape[1]
    blocks = []
    for group in ex.config.include:
        if group == "confidence":
            blocks.append(probs.max(axis=1, keepdims=True))
        elif group == "onehot":
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(probs)), probs.argmax(axis=1)] = 1.0
            blocks.append(onehot)
        elif group == "distribution":
            blocks.append(probs)
        elif group == "kde":
            blocks.append(ex.kde_log_density(reps)[:, None])
        elif group == "iforest":
            blocks.append(ex.iforest_score(reps)[:, None])
        elif group == "knn":
            blocks.append(ex.knn_distance(reps)[:, None])
        elif group == "raw":
            blocks.append(ex._project(reps))
    return np.hstack(blocks)


def extract(ex: FeatureExtractor, model: BaseModel, x: np.ndarray) -> MetaVector:
    """Single-example meta vector."""
    values = extract_batch(ex, model, np.atleast_2d(x))[0]
    probs = np.atleast_2d(predict(model, np.atleast_2d(x)))
    proj_dim = ex.store.shape[1] if ex.store is not None else ex.rep_dim
    return MetaVector(values=values, layout=_layout(ex.config, probs.shape[1], ex.rep_dim, proj_dim))


def baseline_scores(ex: FeatureExtractor, model: BaseModel, x: np.ndarray) -> dict:
    """Soft selection scores per baseline, oriented so that a higher score
    means the example is preferred (more confident / more inlying)."""
    if not ex.fitted:
        raise ModelStateError("extractor has not been fitted")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    probs = np.atleast_2d(predict(model, x))
    reps = np.atleast_2d(hidden(model, x))
    return {
        "confidence": probs.max(axis=1),
        "neg_kde": ex.kde_log_density(reps),
        "neg_iforest": -ex.iforest_score(reps),
        "neg_knn": -ex.knn_distance(reps),
    }


def save_extractor(ex: FeatureExtractor, path) -> None:
    """Text persistence in the shared model format, kind tag `extractor`."""
    if not ex.fitted:
        raise ModelStateError("extractor has not been fitted")
    lines = [f"extractor {ex.rep_dim} 1"]
    lines.append("include " + ",".join(ex.config.include))
    lines.append(f"knn_k {ex.config.knn_k}")
    lines.append(f"iforest_subsample {ex.config.iforest_subsample}")
    lines.append(f"store_max {ex.config.store_max}")
    lines.append(f"projection_max_dim {ex.config.projection_max_dim}")

    def emit_matrix(name, mat):
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(f"{v:.17g}" for v in row))

    if ex.projection is not None:
        emit_matrix("projection", ex.projection)
    emit_matrix("store", ex.store)
    lines.append("kde_bandwidths " + " ".join(f"{v:.17g}" for v in ex.kde_bandwidths))
    lines.append(f"iforest {len(ex.trees)}")
    for tree in ex.trees:
        lines.append(f"tree {len(tree.feature)}")
        for i in range(len(tree.feature)):
            lines.append(
                f"{tree.feature[i]} {tree.threshold[i]:.17g} {tree.left[i]} "
                f"{tree.right[i]} {tree.size[i]} {tree.depth[i]}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_extractor(path) -> FeatureExtractor:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    head = lines[0].split()
    if head[0] != "extractor":
        raise ParameterError(f"{path} is not an extractor file")
    rep_dim = int(head[1])
    pos = 1
    fields = {}
    while pos < len(lines) and not lines[pos].startswith(("projection", "store", "kde_bandwidths", "iforest")):
        key, _, value = lines[pos].partition(" ")
        fields[key] = value
        pos += 1

    def read_matrix():
        nonlocal pos
        _, rows, cols = lines[pos].split()
        rows, cols = int(rows), int(cols)
        pos += 1
        mat = np.array([[float(v) for v in lines[pos + r].split()] for r in range(rows)])
        pos += rows
        return mat.reshape(rows, cols)

    projection = None
    if lines[pos].startswith("projection"):
        projection = read_matrix()
    store = read_matrix()
    bw = np.array([float(v) for v in lines[pos].split()[1:]])
    pos += 1
    ntrees = int(lines[pos].split()[1])
    pos += 1
    trees = []
    for _ in range(ntrees):
        n_nodes = int(lines[pos].split()[1])
        pos += 1
        rows = [lines[pos + i].split() for i in range(n_nodes)]
        pos += n_nodes
        trees.append(IsolationTree(
            feature=np.array([int(r[0]) for r in rows]),
            threshold=np.array([float(r[1]) for r in rows]),
            left=np.array([int(r[2]) for r in rows]),
            right=np.array([int(r[3]) for r in rows]),
            size=np.array([int(r[4]) for r in rows]),
            depth=np.array([int(r[5]) for r in rows]),
        ))
    config = ExtractorConfig(
        include=tuple(fields["include"].split(",")),
        knn_k=int(fields["knn_k"]),
        iforest_trees=ntrees,
        iforest_subsample=int(fields["iforest_subsample"]),
        store_max=int(fields["store_max"]),
        projection_max_dim=int(fields["projection_max_dim"]),
    )
    return FeatureExtractor(config=config, store=store, kde_bandwidths=bw,
                            trees=tuple(trees), projection=projection,
                            rep_dim=rep_dim, fitted=True)
