"""Depth-capped regression trees and deterministically seeded bagged blocks.

Trees are grown by greedy variance-reduction (CART regression) splitting:
candidate thresholds are midpoints between consecutive distinct sorted
values of each candidate feature, ties are broken toward the lowest feature
index and then the lowest threshold, and growth stops at the depth cap, at
node size < 2*min_leaf, or at zero impurity.  A block bags ``n_trees`` such
trees, each fitted on a bootstrap sample drawn from an independent RNG
stream keyed by (seed, block_index, tree_index), so results are
bit-identical regardless of worker-thread count.

The hot loops are compiled with numba; node data lives in parallel arrays
(node 0 is the root, feature_index -1 marks leaves).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit


class ForestError(Exception):
    pass


class EmptyData(ForestError):
    pass


class NonFiniteInput(ForestError):
    pass


class FeatureCountMismatch(ForestError):
    pass


class UnfittedModel(ForestError):
    pass


@njit(cache=True, nogil=True)
def _grow(
    X,
    y,
    samples,
    d_max,
    min_leaf,
    node_feats,
    use_node_feats,
    feature_index,
    threshold,
    left,
    right,
    leaf_value,
    n_samples,
    impurity_decrease,
):
    n_total = samples.shape[0]
    n_feat = X.shape[1]
    cap = 2 * n_total + 2
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_total
    st_depth[0] = 0
    top = 1
    count = 1
    buf = np.empty(n_total, np.int64)
    xs = np.empty(n_total, np.float64)

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        n = end - start

        s_tot = 0.0
        q_tot = 0.0
        ymin = y[samples[start]]
        ymax = ymin
        for i in range(start, end):
            yi = y[samples[i]]
            s_tot += yi
            q_tot += yi * yi
            if yi < ymin:
                ymin = yi
            if yi > ymax:
                ymax = yi
        n_samples[node] = n
        leaf_value[node] = s_tot / n

        if depth >= d_max or n < 2 * min_leaf or ymin == ymax:
            feature_index[node] = -1
            left[node] = -1
            right[node] = -1
            impurity_decrease[node] = 0.0
            continue

        sse_node = q_tot - s_tot * s_tot / n
        if sse_node < 0.0:
            sse_node = 0.0

        best_sse = np.inf
        best_f = -1
        best_thr = 0.0
        n_cand = node_feats.shape[1] if use_node_feats else n_feat
        for ci in range(n_cand):
            f = node_feats[node, ci] if use_node_feats else ci
            for i in range(n):
                xs[i] = X[samples[start + i], f]
            order = np.argsort(xs[:n])
            s = 0.0
            q = 0.0
            prev_x = xs[order[0]]
            for i in range(1, n):
                yi = y[samples[start + order[i - 1]]]
                s += yi
                q += yi * yi
                cur_x = xs[order[i]]
                if cur_x > prev_x and i >= min_leaf and n - i >= min_leaf:
                    sl = q - s * s / i
                    if sl < 0.0:
                        sl = 0.0
                    sr = (q_tot - q) - (s_tot - s) * (s_tot - s) / (n - i)
                    if sr < 0.0:
                        sr = 0.0
                    tot = sl + sr
                    if tot < best_sse:
                        best_sse = tot
                        best_f = f
                        best_thr = 0.5 * (prev_x + cur_x)
                prev_x = cur_x

        if best_f < 0:
            feature_index[node] = -1
            left[node] = -1
            right[node] = -1
            impurity_decrease[node] = 0.0
            continue

        feature_index[node] = best_f
        threshold[node] = best_thr
        dec = (sse_node - best_sse) / n
        impurity_decrease[node] = dec if dec > 0.0 else 0.0

        nl = 0
        nr = 0
        for i in range(start, end):
            si = samples[i]
            if X[si, best_f] <= best_thr:
                samples[start + nl] = si
                nl += 1
            else:
                buf[nr] = si
                nr += 1
        for i in range(nr):
            samples[start + nl + i] = buf[i]

        lid = count
        rid = count + 1
        count += 2
        left[node] = lid
        right[node] = rid
        st_node[top] = rid
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lid
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1

    return count


@njit(cache=True, nogil=True)
def _predict_into(feature_index, threshold, left, right, leaf_value, X, out):
    for i in range(X.shape[0]):
        node = 0
        while feature_index[node] >= 0:
            if X[i, feature_index[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += leaf_value[node]


@dataclass(frozen=True)
class RegressionTree:
    """Parallel node arrays; node 0 is the root, feature_index -1 marks leaves."""

    feature_index: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_value: np.ndarray
    n_samples: np.ndarray
    impurity_decrease: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature_index.shape[0])

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        md = 0
        for i in range(self.n_nodes):
            if self.feature_index[i] >= 0:
                for c in (int(self.left[i]), int(self.right[i])):
                    depth[c] = depth[i] + 1
                    if depth[c] > md:
                        md = depth[c]
        return md

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        out = np.zeros(X.shape[0])
        _predict_into(
            self.feature_index, self.threshold, self.left, self.right, self.leaf_value, X, out
        )
        return out


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int
    d_max: int
    min_leaf: int = 1
    bootstrap: bool = True
    mtry: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class EnsembleBlock:
    """A bag of trees fitted in one training event.

    ``k`` is the training-iteration index (0 for the shared base block) and
    ``alpha`` the block's current mixing weight in a pooled model.
    """

    trees: tuple[RegressionTree, ...]
    config: ForestConfig
    k: int
    n_features: int
    alpha: float = 1.0
    feature_names: tuple[str, ...] | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise EmptyData(f"expected a 2-d feature matrix, got shape {X.shape}")
    return X


def _check_training_data(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise EmptyData(f"cannot fit on shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise FeatureCountMismatch(f"y has shape {y.shape}, X has {X.shape[0]} rows")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise NonFiniteInput("training data contains non-finite values")


def _node_feature_sets(n_nodes_cap: int, n_feat: int, mtry: int, rng: np.random.Generator) -> np.ndarray:
    rows = np.tile(np.arange(n_feat, dtype=np.int64), (n_nodes_cap, 1))
    rows = rng.permuted(rows, axis=1)
    return np.sort(rows[:, :mtry], axis=1)


def _fit_on_samples(
    X: np.ndarray,
    y: np.ndarray,
    samples: np.ndarray,
    d_max: int,
    min_leaf: int,
    mtry: int | None,
    rng: np.random.Generator | None,
) -> RegressionTree:
    n = samples.shape[0]
    cap = 2 * n - 1 if n > 1 else 1
    feature_index = np.empty(cap, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.empty(cap, np.int64)
    right = np.empty(cap, np.int64)
    leaf_value = np.empty(cap, np.float64)
    n_samples = np.empty(cap, np.int64)
    impurity_decrease = np.empty(cap, np.float64)

    n_feat = X.shape[1]
    use_sets = mtry is not None and mtry < n_feat
    if use_sets:
        if rng is None:
            rng = np.random.default_rng(0)
        node_feats = _node_feature_sets(cap, n_feat, mtry, rng)
    else:
        node_feats = np.zeros((1, 1), np.int64)

    count = _grow(
        X,
        y,
        samples,
        d_max,
        min_leaf,
        node_feats,
        use_sets,
        feature_index,
        threshold,
        left,
        right,
        leaf_value,
        n_samples,
        impurity_decrease,
    )
    tree = RegressionTree(
        feature_index=feature_index[:count].copy(),
        threshold=threshold[:count].copy(),
        left=left[:count].copy(),
        right=right[:count].copy(),
        leaf_value=leaf_value[:count].copy(),
        n_samples=n_samples[:count].copy(),
        impurity_decrease=impurity_decrease[:count].copy(),
    )
    for a in vars(tree).values():
        a.setflags(write=False)
    return tree


def fit_tree(
    X,
    y,
    d_max: int,
    min_leaf: int = 1,
    mtry: int | None = None,
    rng: np.random.Generator | None = None,
) -> RegressionTree:
    """Fit one greedy variance-reduction tree on the full sample."""
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    _check_training_data(X, y)
    if d_max < 1 or min_leaf < 1:
        raise ValueError("d_max and min_leaf must be >= 1")
    if mtry is not None and not (1 <= mtry <= X.shape[1]):
        raise ValueError(f"mtry must be in [1, {X.shape[1]}]")
    samples = np.arange(X.shape[0], dtype=np.int64)
    return _fit_on_samples(X, y, samples, d_max, min_leaf, mtry, rng)


def _tree_rng(seed: int, k: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k, t)))


def fit_block(
    X,
    y,
    config: ForestConfig,
    k: int = 0,
    n_threads: int = 1,
    feature_names: Sequence[str] | None = None,
) -> EnsembleBlock:
    """Fit a bagged block of ``config.n_trees`` trees.

    Tree ``t`` draws its bootstrap sample (and any per-node feature subsets)
    from an RNG stream derived from (config.seed, k, t); the fit is therefore
    reproducible bit-for-bit for any ``n_threads``.
    """
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    _check_training_data(X, y)
    if config.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if config.seed < 0:
        raise ValueError("seed must be non-negative")
    if config.mtry is not None and config.mtry > X.shape[1]:
        raise FeatureCountMismatch(f"mtry={config.mtry} exceeds {X.shape[1]} features")
    n = X.shape[0]

    def fit_one(t: int) -> RegressionTree:
        rng = _tree_rng(config.seed, k, t)
        if config.bootstrap:
            samples = rng.integers(0, n, size=n).astype(np.int64)
        else:
            samples = np.arange(n, dtype=np.int64)
        return _fit_on_samples(X, y, samples, config.d_max, config.min_leaf, config.mtry, rng)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            trees = tuple(pool.map(fit_one, range(config.n_trees)))
    else:
        trees = tuple(fit_one(t) for t in range(config.n_trees))
    return EnsembleBlock(
        trees=trees,
        config=config,
        k=k,
        n_features=X.shape[1],
        alpha=1.0,
        feature_names=tuple(feature_names) if feature_names is not None else None,
    )


def block_sum(block: EnsembleBlock, X: np.ndarray) -> np.ndarray:
    """Sum of per-tree predictions, accumulated in tree-index order."""
    X = _as_matrix(X)
    if X.shape[1] != block.n_features:
        raise FeatureCountMismatch(f"expected {block.n_features} features, got {X.shape[1]}")
    out = np.zeros(X.shape[0])
    for tree in block.trees:
        _predict_into(
            tree.feature_index, tree.threshold, tree.left, tree.right, tree.leaf_value, X, out
        )
    return out


def predict_block(block: EnsembleBlock, X) -> np.ndarray:
    """Mean over the block's trees of per-tree leaf values."""
    X = _as_matrix(X)
    return block_sum(block, X) / block.n_trees


def feature_importances(blocks: EnsembleBlock | Iterable[EnsembleBlock]) -> np.ndarray:
    """Impurity-based importances, normalized to sum to 1.

    Per tree, each internal node contributes its variance decrease weighted
    by the fraction of that tree's training samples reaching the node; the
    per-tree totals are averaged over all trees and normalized.  Features
    never split on (e.g. constants) get 0.
    """
    if isinstance(blocks, EnsembleBlock):
        blocks = [blocks]
    else:
        blocks = list(blocks)
    if not blocks or any(len(b.trees) == 0 for b in blocks):
        raise UnfittedModel("no fitted trees")
    n_feat = blocks[0].n_features
    acc = np.zeros(n_feat)
    n_trees = 0
    for b in blocks:
        if b.n_features != n_feat:
            raise FeatureCountMismatch("blocks disagree on feature count")
        for t in b.trees:
            internal = t.feature_index >= 0
            if internal.any():
                w = t.impurity_decrease[internal] * (t.n_samples[internal] / t.n_samples[0])
                acc += np.bincount(t.feature_index[internal], weights=w, minlength=n_feat)
            n_trees += 1
    acc /= n_trees
    total = acc.sum()
    if total > 0.0:
        acc /= total
    return acc


def select_features(importances, cumulative_threshold: float) -> tuple[int, ...]:
    """Smallest importance-descending prefix reaching the cumulative threshold.

    Ties are broken toward the lower feature index; zero-importance features
    are never selected.  Returned indices are in descending-importance order.
    """
    imp = np.asarray(importances, dtype=float)
    if not (0.0 < cumulative_threshold <= 1.0):
        raise ValueError("cumulative_threshold must be in (0, 1]")
    order = np.argsort(-imp, kind="stable")
    chosen: list[int] = []
    cum = 0.0
    for idx in order:
        if imp[idx] <= 0.0:
            break
        chosen.append(int(idx))
        cum += imp[idx]
        if cum >= cumulative_threshold - 1e-12:
            break
    return tuple(chosen)


# ---------------------------------------------------------------------------
# serialization (parallel node arrays, schema shared with the model file)
# ---------------------------------------------------------------------------

def tree_to_dict(tree: RegressionTree) -> dict:
    return {
        "feature_index": tree.feature_index.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "leaf_value": tree.leaf_value.tolist(),
        "n_samples": tree.n_samples.tolist(),
        "impurity_decrease": tree.impurity_decrease.tolist(),
    }


def tree_from_dict(d: dict) -> RegressionTree:
    tree = RegressionTree(
        feature_index=np.asarray(d["feature_index"], dtype=np.int64),
        threshold=np.asarray(d["threshold"], dtype=np.float64),
        left=np.asarray(d["left"], dtype=np.int64),
        right=np.asarray(d["right"], dtype=np.int64),
        leaf_value=np.asarray(d["leaf_value"], dtype=np.float64),
        n_samples=np.asarray(d["n_samples"], dtype=np.int64),
        impurity_decrease=np.asarray(d["impurity_decrease"], dtype=np.float64),
    )
    for a in vars(tree).values():
        a.setflags(write=False)
    return tree
