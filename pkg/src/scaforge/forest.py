"""CART random forest with Gini impurity and mean-decrease-in-impurity importance.

Trees are grown on bootstrap samples with per-node feature subsampling.
All randomness is keyed by (seed, tree-index, node-id), so forests are
reproducible regardless of execution order and a deeper tree is an exact
refinement of a shallower one grown from the same seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

N_CLASSES = 256
_PROB_FLOOR = 1e-12

_MAGIC = b"SCRF"
_VERSION = 1


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 20
    min_samples_leaf: int = 10
    max_features: Union[str, int] = "sqrt"  # "sqrt", "all", or a fixed count
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth, min_samples_leaf must be >= 1")
        if isinstance(self.max_features, str):
            if self.max_features not in ("sqrt", "all"):
                raise ValueError(f"unknown max_features {self.max_features!r}")
        elif int(self.max_features) < 1:
            raise ValueError("fixed max_features must be >= 1")

    def n_candidates(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return min(int(self.max_features), n_features)


@dataclass
class Tree:
    """Flattened binary tree. feature[i] == -1 marks a leaf; leaf_slot[i]
    then indexes into leaf_dist."""

    feature: np.ndarray     # (n_nodes,) int32
    threshold: np.ndarray   # (n_nodes,) float64
    left: np.ndarray        # (n_nodes,) int32
    right: np.ndarray       # (n_nodes,) int32
    leaf_slot: np.ndarray   # (n_nodes,) int32
    leaf_dist: np.ndarray   # (n_leaves, 256) float64, rows sum to 1
    leaf_count: np.ndarray  # (n_leaves,) int64 bootstrap samples per leaf

    @property
    def n_splits(self) -> int:
        return int(np.sum(self.feature >= 0))


@dataclass
class ForestModel:
    config: ForestConfig
    n_features: int
    trees: list[Tree] = field(default_factory=list)
    tree_importance: np.ndarray | None = None  # (n_trees, L) raw MDI sums


@dataclass
class FeatureRanking:
    importances: np.ndarray  # (L,) >= 0, sums to 1 unless all-zero
    order: np.ndarray        # (L,) feature indices, importance-descending


def _node_rng(seed: int, tree_idx: int, node_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tree_idx, node_id)))


def _best_split(x: np.ndarray, y: np.ndarray, candidates: np.ndarray,
                counts: np.ndarray, min_leaf: int):
    """Best (feature, threshold) over the candidate columns of x.

    Maximizes sum_c c_L^2/n_L + sum_c c_R^2/n_R (equivalently minimizes the
    weighted child Gini). Candidate thresholds are midpoints of consecutive
    distinct sorted values; ties resolve to the lowest feature index, then
    the lowest threshold. Returns None when no split reduces impurity.
    """
    n = x.shape[0]
    xc = x[:, candidates]
    order = np.argsort(xc, axis=0, kind="stable")
    v = np.take_along_axis(xc, order, axis=0)
    ys = y[order]

    # occurrence index of each label within its column prefix, via a stable
    # secondary sort on the labels
    lab_order = np.argsort(ys, axis=0, kind="stable")
    sorted_labels = np.take_along_axis(ys, lab_order, axis=0)
    is_new = np.ones_like(sorted_labels, dtype=bool)
    is_new[1:] = sorted_labels[1:] != sorted_labels[:-1]
    rows = np.arange(n)[:, None]
    group_start = np.maximum.accumulate(np.where(is_new, rows, 0), axis=0)
    occ = np.empty_like(lab_order)
    np.put_along_axis(occ, lab_order, rows - group_start, axis=0)
    occ_r = counts[ys] - occ - 1

    # prefix/suffix sums of squared class counts; exact integers in float64
    sum_sq_left = np.cumsum(2.0 * occ + 1.0, axis=0)
    sum_sq_right = np.cumsum((2.0 * occ_r + 1.0)[::-1], axis=0)[::-1]

    i = np.arange(1, n)
    quality = sum_sq_left[:-1] / i[:, None] + sum_sq_right[1:] / (n - i)[:, None]
    valid = (v[1:] > v[:-1]) & (i >= min_leaf)[:, None] & ((n - i) >= min_leaf)[:, None]
    quality = np.where(valid, quality, -np.inf)

    best_pos = np.argmax(quality, axis=0)            # first max: lowest threshold
    best_q = quality[best_pos, np.arange(len(candidates))]
    col = int(np.argmax(best_q))                     # first max: lowest feature
    parent_q = float(np.sum(counts.astype(np.float64) ** 2)) / n
    if not best_q[col] > parent_q + 1e-12 * n:
        return None

    pos = int(best_pos[col]) + 1                     # left part = first pos elements
    lo, hi = v[pos - 1, col], v[pos, col]
    threshold = (lo + hi) / 2.0
    if not lo <= threshold < hi:                     # midpoint rounded onto hi
        threshold = lo
    return int(candidates[col]), float(threshold)


class _TreeBuilder:
    def __init__(self, x, y, cfg: ForestConfig, tree_idx: int, importance: np.ndarray):
        self.x = x
        self.y = y
        self.cfg = cfg
        self.tree_idx = tree_idx
        self.importance = importance
        self.n_total = x.shape[0]
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_slot: list[int] = []
        self.leaf_dist: list[np.ndarray] = []
        self.leaf_count: list[int] = []

    def _add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_slot.append(-1)
        return len(self.feature) - 1

    def _make_leaf(self, node: int, counts: np.ndarray, n: int) -> None:
        self.leaf_slot[node] = len(self.leaf_dist)
        self.leaf_dist.append(counts.astype(np.float64) / n)
        self.leaf_count.append(n)

    def build(self, idx: np.ndarray, depth: int, node_id: int) -> int:
        node = self._add_node()
        y = self.y[idx]
        n = idx.size
        counts = np.bincount(y, minlength=N_CLASSES)
        pure = counts.max() == n
        if depth >= self.cfg.max_depth or pure or n < 2 * self.cfg.min_samples_leaf:
            self._make_leaf(node, counts, n)
            return node

        m = self.cfg.n_candidates(self.x.shape[1])
        rng = _node_rng(self.cfg.seed, self.tree_idx, node_id)
        candidates = np.sort(rng.choice(self.x.shape[1], size=m, replace=False))
        split = _best_split(self.x[idx], y, candidates, counts, self.cfg.min_samples_leaf)
        if split is None:
            self._make_leaf(node, counts, n)
            return node

        feat, thr = split
        go_left = self.x[idx, feat] <= thr
        left_idx, right_idx = idx[go_left], idx[~go_left]

        # mean decrease in impurity, weighted by the node's bootstrap share
        def gini(c, m_):
            return 1.0 - float(np.sum(c.astype(np.float64) ** 2)) / (m_ * m_)
        cl = np.bincount(self.y[left_idx], minlength=N_CLASSES)
        cr = counts - cl
        drop = gini(counts, n) - (left_idx.size / n) * gini(cl, left_idx.size) \
            - (right_idx.size / n) * gini(cr, right_idx.size)
        self.importance[feat] += (n / self.n_total) * drop

        self.feature[node] = feat
        self.threshold[node] = thr
        self.left[node] = self.build(left_idx, depth + 1, 2 * node_id)
        self.right[node] = self.build(right_idx, depth + 1, 2 * node_id + 1)
        return node

    def finish(self) -> Tree:
        return Tree(feature=np.asarray(self.feature, dtype=np.int32),
                    threshold=np.asarray(self.threshold, dtype=np.float64),
                    left=np.asarray(self.left, dtype=np.int32),
                    right=np.asarray(self.right, dtype=np.int32),
                    leaf_slot=np.asarray(self.leaf_slot, dtype=np.int32),
                    leaf_dist=np.vstack(self.leaf_dist),
                    leaf_count=np.asarray(self.leaf_count, dtype=np.int64))


def fit_forest(samples: np.ndarray, labels, cfg: ForestConfig | None = None) -> ForestModel:
    """Grow the configured number of CART trees on bootstrap resamples."""
    cfg = cfg or ForestConfig()
    x = np.ascontiguousarray(samples, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("samples must be a nonempty N x L matrix")
    if y.shape != (x.shape[0],):
        raise ValueError("labels must have shape (N,)")
    if y.min() < 0 or y.max() > 255:
        raise ValueError("labels must be in 0..255")
    if x.shape[0] < cfg.min_samples_leaf:
        raise ValueError("need at least min_samples_leaf traces")
    y = y.astype(np.int64)

    model = ForestModel(config=cfg, n_features=x.shape[1])
    model.tree_importance = np.zeros((cfg.n_trees, x.shape[1]))
    for t in range(cfg.n_trees):
        boot_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(t,)))
        boot = boot_rng.integers(0, x.shape[0], size=x.shape[0])
        builder = _TreeBuilder(x[boot], y[boot], cfg, t, model.tree_importance[t])
        builder.build(np.arange(x.shape[0]), depth=0, node_id=1)
        model.trees.append(builder.finish())
    return model


def _tree_leaf_rows(tree: Tree, x: np.ndarray) -> np.ndarray:
    """Leaf-slot index reached by every row of x."""
    cur = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[cur]
        split = feat >= 0
        if not split.any():
            break
        r = np.flatnonzero(split)
        go_left = x[r, feat[r]] <= tree.threshold[cur[r]]
        cur[r] = np.where(go_left, tree.left[cur[r]], tree.right[cur[r]])
    return tree.leaf_slot[cur]


def predict_proba(model: ForestModel, samples: np.ndarray) -> np.ndarray:
    """Tree-averaged leaf class distributions, floored and renormalized."""
    x = np.ascontiguousarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"samples must be M x {model.n_features}")
    probs = np.zeros((x.shape[0], N_CLASSES))
    for tree in model.trees:
        probs += tree.leaf_dist[_tree_leaf_rows(tree, x)]
    probs /= len(model.trees)
    probs = np.maximum(probs, _PROB_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)


def predict_log_proba(model: ForestModel, samples: np.ndarray) -> np.ndarray:
    return np.log(predict_proba(model, samples))


def gini_importance(model: ForestModel) -> FeatureRanking:
    """Mean decrease in impurity, normalized per tree and averaged.

    Trees with no splits are skipped; an all-leaf forest yields an all-zero
    vector.
    """
    acc = np.zeros(model.n_features)
    contributing = 0
    for vec in model.tree_importance:
        total = vec.sum()
        if total > 0:
            acc += vec / total
            contributing += 1
    if contributing:
        acc /= contributing
        acc /= acc.sum()
    order = np.argsort(-acc, kind="stable")  # stable: ties go to lower index
    return FeatureRanking(importances=acc, order=order.astype(np.int64))


def top_k(ranking: FeatureRanking, k: int) -> np.ndarray:
    if not 1 <= k <= ranking.order.size:
        raise ValueError(f"k must be in 1..{ranking.order.size}")
    return ranking.order[:k].copy()


# ---------------------------------------------------------------------------
# checkpoint format: self-describing binary dump, bit-exact on reload

def dump_forest(model: ForestModel, fh) -> None:
    cfg = model.config
    mf = {"sqrt": -1, "all": -2}.get(cfg.max_features, cfg.max_features)
    fh.write(struct.pack("<4sH", _MAGIC, _VERSION))
    fh.write(struct.pack("<IIIqqI", cfg.n_trees, cfg.max_depth,
                         cfg.min_samples_leaf, int(mf), cfg.seed, model.n_features))
    for tree, imp in zip(model.trees, model.tree_importance):
        fh.write(struct.pack("<II", tree.feature.size, tree.leaf_dist.shape[0]))
        fh.write(tree.feature.astype("<i4").tobytes())
        fh.write(tree.threshold.astype("<f8").tobytes())
        fh.write(tree.left.astype("<i4").tobytes())
        fh.write(tree.right.astype("<i4").tobytes())
        fh.write(tree.leaf_slot.astype("<i4").tobytes())
        fh.write(tree.leaf_dist.astype("<f8").tobytes())
        fh.write(tree.leaf_count.astype("<i8").tobytes())
        fh.write(imp.astype("<f8").tobytes())


def save_forest(model: ForestModel, path) -> None:
    with open(path, "wb") as fh:
        dump_forest(model, fh)


def parse_forest(raw: bytes) -> ForestModel:
    magic, version = struct.unpack_from("<4sH", raw)
    if magic != _MAGIC:
        raise ValueError(f"not a forest checkpoint: magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported forest checkpoint version {version}")
    off = 6
    n_trees, max_depth, min_leaf, mf, seed, n_features = struct.unpack_from("<IIIqqI", raw, off)
    off += struct.calcsize("<IIIqqI")
    max_features = {-1: "sqrt", -2: "all"}.get(mf, int(mf))
    cfg = ForestConfig(n_trees=n_trees, max_depth=max_depth, min_samples_leaf=min_leaf,
                       max_features=max_features, seed=seed)
    model = ForestModel(config=cfg, n_features=n_features)
    model.tree_importance = np.zeros((n_trees, n_features))

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    for t in range(n_trees):
        n_nodes, n_leaves = struct.unpack_from("<II", raw, off)
        off += 8
        tree = Tree(feature=take("<i4", n_nodes).copy(),
                    threshold=take("<f8", n_nodes).astype(np.float64),
                    left=take("<i4", n_nodes).copy(),
                    right=take("<i4", n_nodes).copy(),
                    leaf_slot=take("<i4", n_nodes).copy(),
                    leaf_dist=take("<f8", n_leaves * N_CLASSES)
                    .reshape(n_leaves, N_CLASSES).astype(np.float64),
                    leaf_count=take("<i8", n_leaves).copy())
        model.trees.append(tree)
        model.tree_importance[t] = take("<f8", n_features)
    if off != len(raw):
        raise ValueError("trailing bytes in forest checkpoint")
    return model


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        return parse_forest(fh.read())


class ForestClassifier:
    """ProbClassifier adapter around fit_forest/predict_log_proba."""

    def __init__(self, cfg: ForestConfig | None = None):
        self.cfg = cfg or ForestConfig()
        self.model: ForestModel | None = None

    def fit(self, samples, labels) -> "ForestClassifier":
        self.model = fit_forest(samples, labels, self.cfg)
        return self

    def predict_log_proba(self, samples) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("classifier is not fitted")
        return predict_log_proba(self.model, samples)
