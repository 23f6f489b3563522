"""Random forests and the k-fold balanced stacking meta-model over base-model logits."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .metrics import macro_f1
from .model import RecordReader, _write_block, write_tensor_record

STACKER_MAGIC = b"CMSTK1"
STACKER_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 8
    min_samples_split: int = 10
    min_samples_leaf: int = 10
    max_features: int | None = None  # None -> ceil(sqrt(n_features))


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    if (counts < 0).any():
        raise ValueError("negative class counts")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass
class DecisionTree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # node × class sample counts
    depth: np.ndarray
    n_classes: int

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def max_depth(self) -> int:
        return int(self.depth.max())

    def leaf_ids(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        leaf_counts = self.counts[self.leaf_ids(X)].astype(float)
        return leaf_counts / leaf_counts.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def _best_split(X, y1h, rows, features, params: TreeParams):
    """Lowest weighted child impurity over ``features``; ties keep the earlier feature/threshold."""
    n = rows.size
    parent_counts = y1h[rows].sum(axis=0)
    parent = 1.0 - np.sum((parent_counts / n) ** 2)
    best = None
    best_impurity = parent
    min_leaf = params.min_samples_leaf
    for f in features:
        vals = X[rows, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        left_counts = np.cumsum(y1h[rows[order]], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=float)
        valid = (sv[1:] > sv[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        right_counts = parent_counts - left_counts
        n_right = n - n_left
        g_left = 1.0 - np.sum((left_counts / n_left[:, None]) ** 2, axis=1)
        g_right = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
        impurity = (n_left * g_left + n_right * g_right) / n
        impurity = np.where(valid, impurity, np.inf)
        i = int(np.argmin(impurity))
        # strict improvement over the parent and over earlier features
        if impurity[i] < best_impurity - 1e-12:
            lo, hi = sv[i], sv[i + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best_impurity = impurity[i]
            best = (int(f), float(thr), float(parent - impurity[i]))
    return best


def fit_tree(X, y, n_classes: int, params: TreeParams = TreeParams(),
             rng: np.random.Generator | None = None) -> DecisionTree:
    """Greedy CART tree with the Gini criterion and per-node random feature subsets."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(0)
    n, n_features = X.shape
    k = params.max_features or math.ceil(math.sqrt(n_features))
    k = min(k, n_features)
    y1h = np.eye(n_classes)[y]

    feature, threshold, left, right, counts, depth = [], [], [], [], [], []

    def new_node(rows, d):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[rows], minlength=n_classes))
        depth.append(d)
        return len(feature) - 1

    root = new_node(np.arange(n), 0)
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, rows, d = stack.pop()
        node_counts = counts[node]
        if (d >= params.max_depth or rows.size < params.min_samples_split
                or np.count_nonzero(node_counts) <= 1):
            continue
        feats = np.sort(rng.choice(n_features, size=k, replace=False))
        split = _best_split(X, y1h, rows, feats, params)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        lid = new_node(lrows, d + 1)
        rid = new_node(rrows, d + 1)
        feature[node], threshold[node], left[node], right[node] = f, thr, lid, rid
        stack.append((rid, rrows, d + 1))
        stack.append((lid, lrows, d + 1))

    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(counts, dtype=np.int64), np.array(depth, dtype=np.int64), n_classes)


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    n_classes: int
    n_features: int

    def predict_proba(self, X) -> np.ndarray:
        """Sum of per-tree leaf class-proportion vectors, renormalised to a distribution."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected rows of width {self.n_features}, got shape {X.shape}")
        total = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def fit_forest(X, y, n_classes: int, n_trees: int = 200, params: TreeParams = TreeParams(),
               seed: int = 0) -> RandomForest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    trees = []
    for t in range(n_trees):
        rng = tree_rng(seed, t)
        rows = rng.integers(0, X.shape[0], size=X.shape[0])
        trees.append(fit_tree(X[rows], y[rows], n_classes, params, rng))
    return RandomForest(trees, n_classes, X.shape[1])


def balance_downsample(labels, n_classes: int, seed: int = 0) -> np.ndarray:
    """Indices of a subset holding exactly ``min_j N_j`` samples of every class."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"classes {missing.tolist()} absent; cannot balance")
    n_min = int(counts.min())
    rng = np.random.default_rng(seed)
    keep = [rng.choice(np.flatnonzero(labels == c), size=n_min, replace=False) for c in range(n_classes)]
    return np.sort(np.concatenate(keep))


def stratified_folds(labels, n_folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; each class is dealt round-robin over a shuffled order."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


@dataclass
class StackerModel:
    forests: list[RandomForest]
    n_models: int
    n_classes: int
    params: TreeParams = field(default_factory=TreeParams)
    seed: int = 0
    # training bookkeeping; not serialised
    train_rows: np.ndarray | None = None
    folds: np.ndarray | None = None
    oof_pred: np.ndarray | None = None
    oof_labels: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.n_models * self.n_classes

    def oof_macro_f1(self) -> float:
        return macro_f1(self.oof_labels, self.oof_pred, self.n_classes)


def _seeds(seed: int) -> tuple[int, int, list[int]]:
    ss = np.random.SeedSequence(seed)
    balance, folds, forests = ss.generate_state(3, dtype=np.uint32)
    return int(balance), int(folds), [int(forests)]


def fit_stacker(logits: Sequence[np.ndarray], labels, n_classes: int, seed: int = 0, n_folds: int = 5,
                n_trees: int = 200, params: TreeParams = TreeParams()) -> StackerModel:
    """Fit one forest per fold on the class-balanced subset of concatenated logits.

    ``logits`` has one ``n × E`` array per base model, rows aligned on the
    same samples as ``labels``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    blocks = [np.asarray(block, dtype=float) for block in logits]
    for i, block in enumerate(blocks):
        if block.shape != (labels.size, n_classes):
            raise ValueError(f"logit block {i} has shape {block.shape}, expected {(labels.size, n_classes)}")
    X = np.concatenate(blocks, axis=1)
    balance_seed, fold_seed, (forest_seed,) = _seeds(seed)
    rows = balance_downsample(labels, n_classes, balance_seed)
    Xb, yb = X[rows], labels[rows]
    folds = stratified_folds(yb, n_folds, fold_seed)
    forests = []
    oof = np.empty(rows.size, dtype=np.int64)
    for k in range(n_folds):
        train_idx = np.flatnonzero(folds != k)
        forest = fit_forest(Xb[train_idx], yb[train_idx], n_classes, n_trees, params, seed=forest_seed + k)
        held = np.flatnonzero(folds == k)
        if held.size:
            oof[held] = forest.predict(Xb[held])
        forests.append(forest)
    return StackerModel(forests, len(blocks), n_classes, params, seed, rows, folds, oof, yb)


def predict_stacker(model: StackerModel, rows) -> np.ndarray:
    """Average the fold forests' class-proportion vectors and take the argmax (lowest index on ties)."""
    return stacker_proba(model, rows).argmax(axis=1)


def stacker_proba(model: StackerModel, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != model.n_features:
        raise ValueError(f"stacker expects rows of width {model.n_features} "
                         f"({model.n_models} models × {model.n_classes} logits), got {rows.shape}")
    total = np.zeros((rows.shape[0], model.n_classes))
    for forest in model.forests:
        total += forest.predict_proba(rows)
    return total / len(model.forests)


# -- logit files --------------------------------------------------------------

def write_logits(path, ids: Sequence[str], logits: np.ndarray) -> None:
    logits = np.asarray(logits, dtype=float)
    lines = ["\t".join(["id"] + [f"logit_{j}" for j in range(logits.shape[1])])]
    for sample_id, row in zip(ids, logits):
        lines.append("\t".join([sample_id] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_logits(path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty logits file")
    header = lines[0].split("\t")
    width = len(header) - 1
    if header[0] != "id" or header[1:] != [f"logit_{j}" for j in range(width)] or width < 1:
        raise FormatError(f"{path}: header must be id, logit_0 .. logit_{{E-1}}")
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != width + 1:
            raise FormatError(f"{path}:{lineno}: expected {width + 1} columns, got {len(cells)}")
        ids.append(cells[0])
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return ids, np.array(rows, dtype=float).reshape(len(ids), width)


def align_logits(tables: Sequence[tuple[list[str], np.ndarray]], names: Sequence[str] | None = None):
    """Check every table lists the same ids in the same order; return ids and the blocks."""
    ref_ids = tables[0][0]
    for i, (ids, _) in enumerate(tables[1:], start=1):
        if ids != ref_ids:
            label = names[i] if names else f"table {i}"
            bad = next((j for j, (a, b) in enumerate(zip(ids, ref_ids)) if a != b), min(len(ids), len(ref_ids)))
            raise ValueError(f"{label}: sample ids not aligned with the first file (first difference at row {bad})")
    return ref_ids, [block for _, block in tables]


# -- serialisation ------------------------------------------------------------

def save_stacker(model: StackerModel, path) -> None:
    p = model.params
    config = (f"n_models={model.n_models}\nn_classes={model.n_classes}\nn_forests={len(model.forests)}\n"
              f"n_trees={len(model.forests[0].trees)}\nmax_depth={p.max_depth}\n"
              f"min_samples_split={p.min_samples_split}\nmin_samples_leaf={p.min_samples_leaf}\n"
              f"max_features={p.max_features or 0}\nseed={model.seed}\n")
    with open(path, "wb") as fh:
        fh.write(STACKER_MAGIC)
        fh.write(struct.pack("<H", STACKER_VERSION))
        _write_block(fh, config.encode("utf-8"))
        for f, forest in enumerate(model.forests):
            for t, tree in enumerate(forest.trees):
                prefix = f"forest{f}.tree{t}."
                write_tensor_record(fh, prefix + "feature", tree.feature.astype(float))
                write_tensor_record(fh, prefix + "threshold", tree.threshold)
                write_tensor_record(fh, prefix + "left", tree.left.astype(float))
                write_tensor_record(fh, prefix + "right", tree.right.astype(float))
                write_tensor_record(fh, prefix + "counts", tree.counts.astype(float))
                write_tensor_record(fh, prefix + "depth", tree.depth.astype(float))


def load_stacker(path) -> StackerModel:
    reader = RecordReader(Path(path).read_bytes(), str(path))
    kv = dict(line.split("=", 1) for line in reader.header(STACKER_MAGIC, STACKER_VERSION).splitlines() if line)
    try:
        cfg = {k: int(v) for k, v in kv.items()}
        params = TreeParams(cfg["max_depth"], cfg["min_samples_split"], cfg["min_samples_leaf"],
                            cfg["max_features"] or None)
        n_classes = cfg["n_classes"]
        n_features = cfg["n_models"] * n_classes
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed stacker config: {exc}") from None
    forests = []
    for f in range(cfg["n_forests"]):
        trees = []
        for t in range(cfg["n_trees"]):
            prefix = f"forest{f}.tree{t}."
            arrays = {key: reader.tensor(prefix + key)[1]
                      for key in ("feature", "threshold", "left", "right", "counts", "depth")}
            trees.append(DecisionTree(arrays["feature"].astype(np.int64), arrays["threshold"],
                                      arrays["left"].astype(np.int64), arrays["right"].astype(np.int64),
                                      arrays["counts"].astype(np.int64), arrays["depth"].astype(np.int64),
                                      n_classes))
        forests.append(RandomForest(trees, n_classes, n_features))
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after last tree")
    return StackerModel(forests, cfg["n_models"], n_classes, params, cfg["seed"])
