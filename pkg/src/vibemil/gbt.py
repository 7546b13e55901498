"""Second-order gradient boosting with histogram split search, from scratch.

Trees minimize the second-order expansion of a weighted logistic loss with L1
(soft-threshold) and L2 (ridge) regularization on leaf weights:

    leaf weight  w* = -soft(G, alpha) / (H + lambda)
    split gain   1/2 * [ s(GL)^2/(HL+l) + s(GR)^2/(HR+l) - s(G)^2/(H+l) ]

where G, H are sums of per-sample gradients g = w * (p - y) and hessians
h = w * p * (1 - p). Split candidates come from per-feature quantile
histograms (at most 256 bins) built once per boosting round on the row/column
subsample, so columns with at most 256 distinct values are searched exactly.
Two growth modes are provided: LEVEL_WISE expands every node of a level up to
the depth cap; LEAF_WISE repeatedly splits the best-gain leaf until the leaf
cap. Ties are broken toward the lowest feature index, then the lowest bin.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ArityMismatch, DegenerateData, OneClassOnly
from .validation import roc_auc

P_CLAMP = 1.0e-12


class Growth(str, enum.Enum):
    LEVEL_WISE = "level"
    LEAF_WISE = "leaf"


@dataclass
class GbtConfig:
    n_estimators: int = 500
    max_depth: int = 5
    learning_rate: float = 0.05
    row_subsample: float = 0.8
    col_subsample: float = 0.8
    l1_alpha: float = 0.1
    l2_lambda: float = 1.0
    early_stop_patience: int = 50
    growth: Growth = Growth.LEVEL_WISE
    max_leaves: int = 31
    n_bins: int = 256
    pos_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.growth = Growth(self.growth)
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.row_subsample <= 1 or not 0 < self.col_subsample <= 1:
            raise ValueError("subsample fractions must be in (0, 1]")
        if self.l1_alpha < 0 or self.l2_lambda < 0:
            raise ValueError("regularization strengths must be >= 0")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if not 2 <= self.n_bins <= 256:
            raise ValueError("n_bins must be in [2, 256]")
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be > 0")


# Second-order machinery ---------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_grad_hess(
    y: np.ndarray, p: np.ndarray, pos_weight: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient and hessian of the weighted logistic loss.

    g = w * (p - y), h = w * p * (1 - p), with w = pos_weight for positives
    and 1 otherwise. Probabilities are clamped away from {0, 1}.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    w = np.where(y == 1.0, pos_weight, 1.0)
    g = w * (p - y)
    h = w * p * (1.0 - p)
    return g, h


def soft_threshold(g, alpha: float):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


def leaf_weight(g_sum: float, h_sum: float, alpha: float, lam: float) -> float:
    """Regularized Newton leaf weight -soft(G, alpha) / (H + lambda)."""
    denom = h_sum + lam
    if denom <= 0.0:
        return 0.0
    return float(-soft_threshold(g_sum, alpha) / denom)


def _gain_term(g, h, alpha: float, lam: float):
    s = soft_threshold(g, alpha)
    denom = np.asarray(h, dtype=np.float64) + lam
    return np.divide(s * s, denom, out=np.zeros_like(denom), where=denom > 0.0)


def split_gain(
    g_left, h_left, g_right, h_right, alpha: float, lam: float
):
    """Objective reduction of a candidate split (may be negative under L1)."""
    parent = _gain_term(np.asarray(g_left) + g_right, np.asarray(h_left) + h_right, alpha, lam)
    return 0.5 * (
        _gain_term(g_left, h_left, alpha, lam)
        + _gain_term(g_right, h_right, alpha, lam)
        - parent
    )


def weighted_logistic_loss(margin: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Weighted mean logistic loss of raw margins: softplus(m) - y*m."""
    m = np.asarray(margin, dtype=np.float64)
    softplus = np.log1p(np.exp(-np.abs(m))) + np.maximum(m, 0.0)
    losses = softplus - y * m
    return float((w * losses).sum() / w.sum())


# Histogram binning ---------------------------------------------------------

def _bin_columns(Xs: np.ndarray, n_bins: int) -> tuple[list[np.ndarray], np.ndarray, int]:
    """Cut points and bin codes for each column of a subsample matrix.

    Columns with at most n_bins distinct values get one bin per value (the
    split search is then exhaustive); wider columns use interior quantiles.
    Bin b holds values in (cut[b-1], cut[b]], so code <= b iff x <= cut[b].
    """
    n, n_cols = Xs.shape
    S = np.sort(Xs, axis=0)
    changed = S[:-1] != S[1:]  # (n-1, F) new-value boundaries
    distinct = 1 + changed.sum(axis=0)

    qs = np.arange(1, n_bins) / n_bins
    h = (n - 1) * qs
    lo = np.floor(h).astype(np.int64)
    frac = (h - lo)[:, None]
    hi = np.minimum(lo + 1, n - 1)
    Q = S[lo] + frac * (S[hi] - S[lo])  # (n_bins-1, F) quantile cuts

    cuts: list[np.ndarray] = []
    codes = np.empty((n, n_cols), dtype=np.int16)
    for j in range(n_cols):
        if distinct[j] <= 1:
            c = np.empty(0, dtype=np.float64)
        elif distinct[j] <= n_bins:
            c = S[:-1, j][changed[:, j]]  # every distinct value except the last
        else:
            c = np.unique(Q[:, j])
            c = c[c < S[-1, j]]
        cuts.append(c)
        codes[:, j] = np.searchsorted(c, Xs[:, j], side="left")
    width = max((len(c) for c in cuts), default=0) + 1
    return cuts, codes, width


# Tree growth ---------------------------------------------------------------

@dataclass
class _NodeTask:
    node: dict
    idx: np.ndarray
    depth: int


class _TreeBuilder:
    def __init__(self, cfg: GbtConfig, Xs: np.ndarray, g: np.ndarray, h: np.ndarray,
                 col_idx: np.ndarray):
        self.cfg = cfg
        self.g = g
        self.h = h
        self.col_idx = col_idx
        self.cuts, codes, self.width = _bin_columns(Xs, cfg.n_bins)
        self.n_cols = Xs.shape[1]
        offsets = np.arange(self.n_cols, dtype=np.int64) * self.width
        self.flat_codes = codes.astype(np.int64) + offsets  # (n, F) feature-major
        self.codes = codes

    def _histograms(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat = self.flat_codes[idx].ravel()
        size = self.n_cols * self.width
        count = np.bincount(flat, minlength=size).reshape(self.n_cols, self.width)
        hg = np.bincount(
            flat, weights=np.repeat(self.g[idx], self.n_cols), minlength=size
        ).reshape(self.n_cols, self.width)
        hh = np.bincount(
            flat, weights=np.repeat(self.h[idx], self.n_cols), minlength=size
        ).reshape(self.n_cols, self.width)
        return count, hg, hh

    def _best_split(self, idx: np.ndarray) -> tuple[float, int, int] | None:
        """Best (gain, local feature, bin) with positive gain, or None.

        Ties break to the lowest feature index then lowest bin via the first
        argmax occurrence over the feature-major candidate grid.
        """
        if self.width < 2 or len(idx) < 2:
            return None
        count, hg, hh = self._histograms(idx)
        nl = np.cumsum(count, axis=1)[:, :-1]
        gl = np.cumsum(hg, axis=1)[:, :-1]
        hl = np.cumsum(hh, axis=1)[:, :-1]
        g_sum = self.g[idx].sum()
        h_sum = self.h[idx].sum()
        gains = split_gain(gl, hl, g_sum - gl, h_sum - hl, self.cfg.l1_alpha, self.cfg.l2_lambda)
        # exclude empty sides exactly via integer counts
        valid = (nl > 0) & (nl < len(idx))
        gains = np.where(valid, gains, -np.inf)
        flat_best = int(np.argmax(gains))
        best_gain = float(gains.flat[flat_best])
        if not best_gain > 0.0:
            return None
        feat, b = divmod(flat_best, self.width - 1)
        return best_gain, feat, b

    def _leafify(self, node: dict, idx: np.ndarray) -> None:
        node["leaf"] = leaf_weight(
            self.g[idx].sum(), self.h[idx].sum(), self.cfg.l1_alpha, self.cfg.l2_lambda
        )

    def _apply_split(self, node: dict, idx: np.ndarray, feat: int, b: int
                     ) -> tuple[_NodeTask, _NodeTask]:
        node["feature"] = int(self.col_idx[feat])
        node["threshold"] = float(self.cuts[feat][b])
        left_mask = self.codes[idx, feat] <= b
        node["left"] = {}
        node["right"] = {}
        return (
            _NodeTask(node["left"], idx[left_mask], 0),
            _NodeTask(node["right"], idx[~left_mask], 0),
        )

    def grow_level_wise(self) -> dict:
        root: dict = {}
        level = [_NodeTask(root, np.arange(len(self.g)), 0)]
        for depth in range(self.cfg.max_depth + 1):
            next_level: list[_NodeTask] = []
            for task in level:
                best = self._best_split(task.idx) if depth < self.cfg.max_depth else None
                if best is None:
                    self._leafify(task.node, task.idx)
                    continue
                _, feat, b = best
                left, right = self._apply_split(task.node, task.idx, feat, b)
                next_level.extend([left, right])
            level = next_level
            if not level:
                break
        return root

    def grow_leaf_wise(self) -> dict:
        root: dict = {}
        counter = 0
        heap: list[tuple[float, int, _NodeTask, tuple[float, int, int]]] = []

        def consider(task: _NodeTask) -> None:
            nonlocal counter
            best = self._best_split(task.idx) if task.depth < self.cfg.max_depth else None
            if best is None:
                self._leafify(task.node, task.idx)
            else:
                # negative gain first; creation order breaks exact ties
                heapq.heappush(heap, (-best[0], counter, task, best))
                counter += 1

        consider(_NodeTask(root, np.arange(len(self.g)), 0))
        n_leaves = 1
        while heap and n_leaves < self.cfg.max_leaves:
            _, _, task, (gain, feat, b) = heapq.heappop(heap)
            left, right = self._apply_split(task.node, task.idx, feat, b)
            left.depth = right.depth = task.depth + 1
            n_leaves += 1
            consider(left)
            consider(right)
        # anything left in the heap stays a leaf
        while heap:
            _, _, task, _ = heapq.heappop(heap)
            self._leafify(task.node, task.idx)
        return root


def _predict_tree(root: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if "leaf" in node:
            out[idx] = node["leaf"]
            continue
        mask = X[idx, node["feature"]] <= node["threshold"]
        stack.append((node["left"], idx[mask]))
        stack.append((node["right"], idx[~mask]))
    return out


# Boosting -------------------------------------------------------------------

@dataclass
class GbtModel:
    config: GbtConfig
    trees: list[dict]
    best_iteration: int
    n_features: int
    train_log: list[dict] = field(default_factory=list)  # round, train_loss, val_auc


def train_gbt(
    cfg: GbtConfig,
    X: np.ndarray,
    y: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> GbtModel:
    """Boost from a zero margin with optional AUC-based early stopping.

    When a validation set is given, training stops once the validation AUC
    has not strictly improved for `early_stop_patience` rounds, and
    best_iteration points at the best round (first round on ties).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"bad training shapes X{X.shape} y{y.shape}")
    if y.min() == y.max():
        raise DegenerateData("training labels contain a single class")
    use_val = X_val is not None
    if use_val:
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.float64)
        if X_val.shape[1] != X.shape[1]:
            raise ArityMismatch(
                f"validation arity {X_val.shape[1]} != train arity {X.shape[1]}"
            )
        if y_val.min() == y_val.max():
            raise OneClassOnly("validation labels contain a single class")

    n, n_features = X.shape
    w = np.where(y == 1.0, cfg.pos_weight, 1.0)
    rng = np.random.default_rng(cfg.seed)
    margin = np.zeros(n)
    margin_val = np.zeros(X_val.shape[0]) if use_val else None

    trees: list[dict] = []
    log: list[dict] = []
    best_auc = -math.inf
    best_iteration = 0
    since_best = 0

    n_rows = math.ceil(cfg.row_subsample * n)
    n_cols = math.ceil(cfg.col_subsample * n_features)

    for round_no in range(1, cfg.n_estimators + 1):
        p = sigmoid(margin)
        g, h = logistic_grad_hess(y, p, cfg.pos_weight)

        if n_rows < n:
            row_idx = np.sort(rng.choice(n, size=n_rows, replace=False))
        else:
            row_idx = np.arange(n)
        if n_cols < n_features:
            col_idx = np.sort(rng.choice(n_features, size=n_cols, replace=False))
        else:
            col_idx = np.arange(n_features)

        builder = _TreeBuilder(cfg, X[np.ix_(row_idx, col_idx)], g[row_idx], h[row_idx], col_idx)
        if cfg.growth is Growth.LEAF_WISE:
            tree = builder.grow_leaf_wise()
        else:
            tree = builder.grow_level_wise()
        trees.append(tree)

        margin += cfg.learning_rate * _predict_tree(tree, X)
        train_loss = weighted_logistic_loss(margin, y, w)
        entry = {"round": round_no, "train_loss": train_loss, "val_auc": math.nan}

        if use_val:
            margin_val += cfg.learning_rate * _predict_tree(tree, X_val)
            auc = roc_auc(y_val, sigmoid(margin_val))
            entry["val_auc"] = auc
            if auc > best_auc:
                best_auc = auc
                best_iteration = round_no
                since_best = 0
            else:
                since_best += 1
            log.append(entry)
            if since_best >= cfg.early_stop_patience:
                break
        else:
            best_iteration = round_no
            log.append(entry)

    return GbtModel(
        config=cfg,
        trees=trees,
        best_iteration=best_iteration,
        n_features=n_features,
        train_log=log,
    )


def predict_gbt(model: GbtModel, X: np.ndarray) -> np.ndarray:
    """Probabilities from trees up to best_iteration; 0.5 for an empty model."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ArityMismatch(
            f"expected {model.n_features} features, got {X.shape[1] if X.ndim == 2 else X.shape}"
        )
    margin = np.zeros(X.shape[0])
    for tree in model.trees[: model.best_iteration]:
        margin += model.config.learning_rate * _predict_tree(tree, X)
    return sigmoid(margin)


# Serialization ---------------------------------------------------------------

def save_gbt(model: GbtModel, path: Path | str, meta: dict | None = None) -> None:
    cfg = asdict(model.config)
    cfg["growth"] = model.config.growth.value
    payload = {
        "kind": "gbt",
        "meta": meta or {},
        "config": cfg,
        "n_features": model.n_features,
        "best_iteration": model.best_iteration,
        "trees": model.trees,
        "train_log": model.train_log,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_gbt(path: Path | str) -> GbtModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = GbtConfig(**payload["config"])
    return GbtModel(
        config=cfg,
        trees=payload["trees"],
        best_iteration=payload["best_iteration"],
        n_features=payload["n_features"],
        train_log=payload.get("train_log", []),
    )


def write_train_log_csv(model: GbtModel, path: Path | str, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            for key, value in meta.items():
                fh.write(f"# {key}={value}\n")
        fh.write("round,train_loss,val_auc\n")
        for entry in model.train_log:
            fh.write(f"{entry['round']},{entry['train_loss']!r},{entry['val_auc']!r}\n")
