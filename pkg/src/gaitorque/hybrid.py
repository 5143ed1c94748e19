"""Pooled ensemble model with a shared base block and per-user adaptation.

The model is an ordered list of :class:`~gaitorque.forest.EnsembleBlock`
values, block 0 being the base fitted on pooled able-bodied data.  After a
trial, a new block is fitted to that trial and appended only when the
trial-level R-squared falls below the threshold ``zeta`` (selective update).
Prediction is the uniform average over all trees of all blocks; with each
block's mixing weight ``alpha_k`` defined as its tree count over the running
total, this equals the recursive convex combination
``alpha_k * block_k + (1 - alpha_k) * previous``, which
:func:`recursive_predict` evaluates literally as a verification oracle.

Amputee trials have no measurable ankle torque on the prosthetic side, so
their training target is a normative trajectory: the pointwise median of
mass-normalized torque over speed-matched able-bodied trials
(:func:`normative_target`).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import CYCLE_SAMPLES, FEATURE_COLUMNS, ProcessedTrial
from .forest import (
    EnsembleBlock,
    FeatureCountMismatch,
    ForestConfig,
    _predict_into,
    fit_block,
    predict_block,
    tree_from_dict,
    tree_to_dict,
)
from .metrics import r_squared

MODEL_VERSION = 1

DROP_POLICIES = ("none", "keep_last_k")

#: Adaptation blocks default to deeper trees than the base (the base must
#: generalize across subjects; adaptation blocks fit one subject's cycle).
DEFAULT_ADAPT_DEPTH = 10


class HybridError(Exception):
    pass


class EmptyDataset(HybridError):
    pass


class NoSpeedMatch(HybridError):
    pass


@dataclass(frozen=True)
class UpdateRecord:
    """Outcome of one selective-update decision."""

    k: int
    trial_id: str
    pre_update_r2: float
    updated: bool
    alpha_k: float | None
    trees_added: int
    train_time_s: float


@dataclass(frozen=True)
class HybridModel:
    blocks: tuple[EnsembleBlock, ...]
    zeta: float
    feature_names: tuple[str, ...]
    update_log: tuple[UpdateRecord, ...] = ()
    adapt_d_max: int = DEFAULT_ADAPT_DEPTH
    adapt_n_trees: int | None = None  # None: same count as the base block
    drop_policy: str = "none"
    keep_last: int = 0

    @property
    def base_hyperparams(self) -> tuple[int, int]:
        cfg = self.blocks[0].config
        return (cfg.d_max, cfg.n_trees)

    @property
    def adapt_hyperparams(self) -> tuple[int, int]:
        return (self.adapt_d_max, self.adapt_n_trees or self.blocks[0].config.n_trees)

    @property
    def n_trees_total(self) -> int:
        return sum(b.n_trees for b in self.blocks)

    def feature_indices(self) -> tuple[int, ...]:
        return tuple(FEATURE_COLUMNS.index(n) for n in self.feature_names)


def _resolve_feature_names(feature_set) -> tuple[str, ...]:
    if feature_set is None:
        return FEATURE_COLUMNS
    names = []
    for f in feature_set:
        if isinstance(f, (int, np.integer)):
            names.append(FEATURE_COLUMNS[int(f)])
        elif f in FEATURE_COLUMNS:
            names.append(f)
        else:
            raise ValueError(f"unknown feature {f!r}")
    if not names:
        raise ValueError("feature_set is empty")
    return tuple(names)


def restrict_features(model: HybridModel, features: np.ndarray) -> np.ndarray:
    """Select and order the model's feature columns from a full 200x9 matrix."""
    features = np.asarray(features, dtype=float)
    if features.shape[1] == len(model.feature_names):
        return np.ascontiguousarray(features)
    if features.shape[1] != len(FEATURE_COLUMNS):
        raise FeatureCountMismatch(
            f"expected {len(model.feature_names)} or {len(FEATURE_COLUMNS)} columns, got {features.shape[1]}"
        )
    return np.ascontiguousarray(features[:, model.feature_indices()])


def fit_base(
    trials: Sequence[ProcessedTrial],
    h0: tuple[int, int] = (6, 100),
    feature_set=None,
    seed: int = 0,
    *,
    zeta: float = 0.99,
    adapt_d_max: int = DEFAULT_ADAPT_DEPTH,
    adapt_n_trees: int | None = None,
    bootstrap: bool = True,
    min_leaf: int = 1,
    mtry: int | None = None,
    drop_policy: str = "none",
    keep_last: int = 0,
    n_threads: int = 1,
) -> HybridModel:
    """Fit the shared base block on the pooled rows of all given trials.

    ``h0`` is (max depth, tree count); ``feature_set`` restricts the model to
    a subset of the canonical feature columns (indices or names).
    """
    trials = list(trials)
    if not trials:
        raise EmptyDataset("no trials to fit the base block on")
    if not (0.0 < zeta <= 1.0):
        raise ValueError(f"zeta must be in (0, 1], got {zeta}")
    if drop_policy not in DROP_POLICIES:
        raise ValueError(f"drop_policy must be one of {DROP_POLICIES}")
    names = _resolve_feature_names(feature_set)
    cols = [FEATURE_COLUMNS.index(n) for n in names]
    X = np.ascontiguousarray(np.vstack([np.asarray(t.features)[:, cols] for t in trials]))
    y = np.concatenate([np.asarray(t.target) for t in trials])
    d0, n0 = h0
    config = ForestConfig(
        n_trees=n0, d_max=d0, min_leaf=min_leaf, bootstrap=bootstrap, mtry=mtry, seed=seed
    )
    block = fit_block(X, y, config, k=0, n_threads=n_threads, feature_names=names)
    return HybridModel(
        blocks=(block,),
        zeta=zeta,
        feature_names=names,
        adapt_d_max=adapt_d_max,
        adapt_n_trees=adapt_n_trees,
        drop_policy=drop_policy,
        keep_last=keep_last,
    )


def predict(model: HybridModel, features: np.ndarray) -> np.ndarray:
    """Uniform mean over all trees of all blocks (N*m/kg).

    Trees are accumulated in (block, tree) index order, so the result is
    bit-reproducible.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise FeatureCountMismatch(
            f"expected {len(model.feature_names)} feature columns, got shape {X.shape}"
        )
    out = np.zeros(X.shape[0])
    for b in model.blocks:
        for t in b.trees:
            _predict_into(t.feature_index, t.threshold, t.left, t.right, t.leaf_value, X, out)
    return out / model.n_trees_total


def recursive_predict(model: HybridModel, features: np.ndarray) -> np.ndarray:
    """Literal right-fold of the convex block combination using stored alphas.

    Exists as an independent evaluator to cross-check :func:`predict`; both
    agree to rounding for any model built through maybe_update.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise FeatureCountMismatch(
            f"expected {len(model.feature_names)} feature columns, got shape {X.shape}"
        )
    out = predict_block(model.blocks[0], X)
    for b in model.blocks[1:]:
        out = b.alpha * predict_block(b, X) + (1.0 - b.alpha) * out
    return out


def normative_target(
    able_trials: Iterable[ProcessedTrial], speed: float, tolerance: float = 0.1
) -> np.ndarray:
    """Pointwise median torque over speed-matched trials, one per subject.

    For every subject with a trial within ``tolerance`` m/s of ``speed``, the
    closest-in-speed trial is taken; the target is the per-sample median of
    their mass-normalized torque trajectories.
    """
    best: dict[str, ProcessedTrial] = {}
    for t in able_trials:
        if abs(t.speed - speed) <= tolerance:
            cur = best.get(t.subject_id)
            if cur is None or abs(t.speed - speed) < abs(cur.speed - speed):
                best[t.subject_id] = t
    if not best:
        raise NoSpeedMatch(f"no trial within +/-{tolerance} m/s of {speed} m/s")
    stacked = np.vstack([np.asarray(t.target) for t in best.values()])
    return np.median(stacked, axis=0)


def _with_running_alphas(blocks: Sequence[EnsembleBlock]) -> tuple[EnsembleBlock, ...]:
    out = []
    cum = 0
    for b in blocks:
        cum += b.n_trees
        out.append(replace(b, alpha=b.n_trees / cum))
    return tuple(out)


def maybe_update(
    model: HybridModel,
    trial: ProcessedTrial,
    target: np.ndarray,
    seed: int,
    *,
    k: int | None = None,
    d_max: int | None = None,
    n_trees: int | None = None,
    n_threads: int = 1,
) -> tuple[HybridModel, UpdateRecord]:
    """Selective update: fit and append a block only when R2 < zeta.

    Returns the (possibly unchanged) model and the decision record.  A
    skipped update returns the input model object itself, so its serialized
    bytes are unchanged.  ``k`` labels the record (defaults to the next block
    index); the new block's RNG streams are keyed by the block index, so a
    model lineage is reproducible from the sequence of seeds alone.
    """
    target = np.asarray(target, dtype=float).ravel()
    if target.shape[0] != CYCLE_SAMPLES:
        raise ValueError(f"target must have {CYCLE_SAMPLES} samples, got {target.shape[0]}")
    X = restrict_features(model, trial.features)
    pre_r2 = r_squared(target, predict(model, X))
    k_label = len(model.blocks) if k is None else k
    if pre_r2 >= model.zeta:
        return model, UpdateRecord(k_label, trial.trial_id, pre_r2, False, None, 0, 0.0)

    base_cfg = model.blocks[0].config
    dk = d_max if d_max is not None else model.adapt_hyperparams[0]
    nk = n_trees if n_trees is not None else model.adapt_hyperparams[1]
    config = ForestConfig(
        n_trees=nk,
        d_max=dk,
        min_leaf=base_cfg.min_leaf,
        bootstrap=base_cfg.bootstrap,
        mtry=base_cfg.mtry,
        seed=seed,
    )
    t0 = time.perf_counter()
    block = fit_block(
        X, target, config, k=len(model.blocks), n_threads=n_threads, feature_names=model.feature_names
    )
    train_time = time.perf_counter() - t0

    alpha_k = nk / (model.n_trees_total + nk)
    blocks = list(model.blocks) + [block]
    if model.drop_policy == "keep_last_k" and model.keep_last >= 1:
        adapt = blocks[1:]
        blocks = [blocks[0]] + adapt[-model.keep_last :]
    new_model = replace(
        model,
        blocks=_with_running_alphas(blocks),
        update_log=model.update_log
        + (UpdateRecord(k_label, trial.trial_id, pre_r2, True, alpha_k, nk, train_time),),
    )
    return new_model, new_model.update_log[-1]


# ---------------------------------------------------------------------------
# model file io
# ---------------------------------------------------------------------------

def model_to_dict(model: HybridModel) -> dict:
    """JSON-ready form.  Wall-clock fields are reporting-only and are not
    persisted, so identical training runs produce identical files."""
    return {
        "format_version": MODEL_VERSION,
        "zeta": model.zeta,
        "feature_names": list(model.feature_names),
        "blocks": [
            {
                "k": b.k,
                "n_trees": b.n_trees,
                "d_max": b.config.d_max,
                "seed": b.config.seed,
                "alpha_k": b.alpha,
                "trees": [tree_to_dict(t) for t in b.trees],
            }
            for b in model.blocks
        ],
        "update_log": [
            {
                "k": r.k,
                "trial_id": r.trial_id,
                "pre_update_r2": r.pre_update_r2,
                "updated": r.updated,
                "alpha_k": r.alpha_k,
                "trees_added": r.trees_added,
            }
            for r in model.update_log
        ],
    }


def model_from_dict(doc: dict) -> HybridModel:
    if doc.get("format_version") != MODEL_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    names = tuple(doc["feature_names"])
    blocks = []
    for b in doc["blocks"]:
        trees = tuple(tree_from_dict(t) for t in b["trees"])
        config = ForestConfig(n_trees=b["n_trees"], d_max=b["d_max"], seed=b["seed"])
        blocks.append(
            EnsembleBlock(
                trees=trees,
                config=config,
                k=b["k"],
                n_features=len(names),
                alpha=float(b["alpha_k"]),
                feature_names=names,
            )
        )
    log = tuple(
        UpdateRecord(
            k=r["k"],
            trial_id=r["trial_id"],
            pre_update_r2=r["pre_update_r2"],
            updated=r["updated"],
            alpha_k=r["alpha_k"],
            trees_added=r["trees_added"],
            train_time_s=0.0,
        )
        for r in doc.get("update_log", [])
    )
    return HybridModel(blocks=tuple(blocks), zeta=doc["zeta"], feature_names=names, update_log=log)


def model_to_bytes(model: HybridModel) -> bytes:
    return (json.dumps(model_to_dict(model), separators=(",", ":")) + "\n").encode()


def save_model(model: HybridModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> HybridModel:
    return model_from_dict(json.loads(Path(path).read_text()))
