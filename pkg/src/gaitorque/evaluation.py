"""Evaluation machinery: CV grid search, rotation protocol, stats, timing.

The rotation protocol mirrors deployment: starting from the shared base
model, one gait cycle at a time is offered for adaptation while the
remaining normal-speed cycles (and all fast cycles, which never train) are
scored.  Every ordering produced by :func:`rotations` is replayed so results
do not depend on cycle order.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import CYCLE_SAMPLES, FEATURE_COLUMNS, Dataset, ProcessedTrial
from .forest import ForestConfig, block_sum, fit_block
from .hybrid import HybridModel, UpdateRecord, maybe_update, predict, restrict_features
from .metrics import ConstantTarget, LengthMismatch, MetricError, r_squared, rmse

__all__ = [
    "r_squared",
    "rmse",
    "MetricError",
    "ConstantTarget",
    "LengthMismatch",
    "subject_kfold",
    "grid_search_cv",
    "GridSearchResult",
    "rotations",
    "run_protocol",
    "ProtocolRow",
    "ProtocolReport",
    "wilcoxon_signed_rank",
    "AllZeroDifferences",
    "FewerSubjectsThanFolds",
    "timing_bench",
    "TimingReport",
]

#: Hyper-parameter grid used for base-model selection when none is given.
DEFAULT_GRID = tuple(
    (d, n) for d in (4, 6, 10, 20, 50, 100) for n in (10, 20, 50, 100, 500, 1000)
)


class EvaluationError(Exception):
    pass


class FewerSubjectsThanFolds(EvaluationError):
    pass


class AllZeroDifferences(EvaluationError):
    pass


def subject_kfold(subject_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Seeded subject-wise folds: all trials of a subject stay on one side.

    Returns k (train_ids, val_ids) pairs whose validation sides are disjoint
    and cover every subject exactly once.
    """
    ids = list(subject_ids)
    n = len(ids)
    if n < k:
        raise FewerSubjectsThanFolds(f"{n} subjects cannot fill {k} folds")
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(n)]
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds = []
    start = 0
    for size in sizes:
        val = perm[start : start + size]
        train = perm[:start] + perm[start + size :]
        folds.append((train, val))
        start += size
    return folds


@dataclass(frozen=True)
class GridSearchResult:
    cells: tuple[tuple[int, int], ...]  # (d_max, n_trees)
    mean_r2: tuple[float, ...]
    mean_rmse: tuple[float, ...]
    best: tuple[int, int]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d_max", "n_trees", "mean_r2", "mean_rmse"])
            for (d, n), r2v, rm in zip(self.cells, self.mean_r2, self.mean_rmse):
                w.writerow([d, n, repr(r2v), repr(rm)])


def _trial_list(dataset) -> list[ProcessedTrial]:
    trials = list(dataset.trials) if isinstance(dataset, Dataset) else list(dataset)
    if not all(isinstance(t, ProcessedTrial) for t in trials):
        raise ValueError("grid search needs processed trials")
    return trials


def grid_search_cv(
    dataset,
    grid: Iterable[tuple[int, int]] = DEFAULT_GRID,
    k: int = 5,
    seed: int = 0,
    *,
    feature_set=None,
    n_threads: int = 1,
) -> GridSearchResult:
    """Subject-wise k-fold scores for every (d_max, n_trees) cell.

    Cell score is the mean over folds of the mean per-trial validation R2.
    Ties for the best cell go to the smaller tree count, then smaller depth.
    Each (cell, fold) fit draws its seed from a stream derived from ``seed``,
    so cells could be evaluated in parallel without changing results.
    """
    trials = _trial_list(dataset)
    cols = _feature_cols(feature_set)
    subject_ids = list(dict.fromkeys(t.subject_id for t in trials))
    folds = subject_kfold(subject_ids, k=k, seed=seed)
    by_subject: dict[str, list[ProcessedTrial]] = {}
    for t in trials:
        by_subject.setdefault(t.subject_id, []).append(t)

    cells = [tuple(c) for c in grid]
    mean_r2 = []
    mean_rmse = []
    for ci, (d, n) in enumerate(cells):
        fold_r2 = []
        fold_rmse = []
        for fi, (train_ids, val_ids) in enumerate(folds):
            train = [t for sid in train_ids for t in by_subject[sid]]
            val = [t for sid in val_ids for t in by_subject[sid]]
            X = np.vstack([np.asarray(t.features)[:, cols] for t in train])
            y = np.concatenate([np.asarray(t.target) for t in train])
            cell_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(ci, fi)).generate_state(1, np.uint64)[0])
            block = fit_block(
                X, y, ForestConfig(n_trees=n, d_max=d, seed=cell_seed), k=0, n_threads=n_threads
            )
            r2s = []
            rmses = []
            for t in val:
                pred = block_sum(block, np.asarray(t.features)[:, cols]) / block.n_trees
                r2s.append(r_squared(t.target, pred))
                rmses.append(rmse(t.target, pred))
            fold_r2.append(float(np.mean(r2s)))
            fold_rmse.append(float(np.mean(rmses)))
        mean_r2.append(float(np.mean(fold_r2)))
        mean_rmse.append(float(np.mean(fold_rmse)))

    return GridSearchResult(
        cells=tuple(cells),
        mean_r2=tuple(mean_r2),
        mean_rmse=tuple(mean_rmse),
        best=best_cell(cells, mean_r2),
    )


def best_cell(cells: Sequence[tuple[int, int]], mean_r2: Sequence[float]) -> tuple[int, int]:
    """Highest-scoring (d_max, n_trees) cell; ties -> smaller n, then smaller d."""
    best_i = min(range(len(cells)), key=lambda i: (-mean_r2[i], cells[i][1], cells[i][0]))
    return tuple(cells[best_i])


def _feature_cols(feature_set) -> list[int]:
    if feature_set is None:
        return list(range(len(FEATURE_COLUMNS)))
    cols = []
    for f in feature_set:
        if isinstance(f, (int, np.integer)):
            cols.append(int(f))
        else:
            cols.append(FEATURE_COLUMNS.index(f))
    return cols


def rotations(items: Sequence) -> list[list]:
    """All cyclic orderings: each step the last element moves to the front."""
    items = list(items)
    if not items:
        raise ValueError("need at least one item")
    return [items[-r:] + items[:-r] for r in range(len(items))]


@dataclass(frozen=True)
class ProtocolRow:
    iteration: int
    rotation: int
    split: str
    r2: float
    rmse: float
    updated: bool
    train_ms: float
    predict_ms: float


@dataclass(frozen=True)
class ProtocolReport:
    subject_id: str
    rows: tuple[ProtocolRow, ...]
    update_records: tuple[tuple[UpdateRecord, ...], ...]  # one tuple per rotation

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "rotation", "split", "r2", "rmse", "updated", "train_ms", "predict_ms"])
            for r in self.rows:
                w.writerow(
                    [
                        r.iteration,
                        r.rotation,
                        r.split,
                        repr(r.r2),
                        repr(r.rmse),
                        "true" if r.updated else "false",
                        f"{r.train_ms:.3f}",
                        f"{r.predict_ms:.3f}",
                    ]
                )

    def r2_by_iteration(self, split: str = "normal") -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if r.split == split:
                out.setdefault(r.iteration, []).append(r.r2)
        return out

    def median_r2(self, split: str = "normal") -> dict[int, float]:
        return {k: float(np.median(v)) for k, v in sorted(self.r2_by_iteration(split).items())}

    def updates_total(self) -> int:
        return sum(rec.updated for rot in self.update_records for rec in rot)

    def trained_trial_ids(self) -> set[str]:
        return {rec.trial_id for rot in self.update_records for rec in rot if rec.updated}


def _stack_restricted(model: HybridModel, trials: Sequence[ProcessedTrial]) -> np.ndarray | None:
    if not trials:
        return None
    return np.ascontiguousarray(np.vstack([restrict_features(model, t.features) for t in trials]))


class _PooledPredictor:
    """Caches per-block prediction sums over fixed evaluation matrices."""

    def __init__(self, X_normal: np.ndarray, X_fast: np.ndarray | None):
        self.X_normal = X_normal
        self.X_fast = X_fast
        self._cache: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def pooled(self, model: HybridModel) -> tuple[np.ndarray, np.ndarray | None]:
        sum_n = np.zeros(self.X_normal.shape[0])
        sum_f = np.zeros(self.X_fast.shape[0]) if self.X_fast is not None else None
        for b in model.blocks:
            key = id(b)
            if key not in self._cache:
                bs_f = block_sum(b, self.X_fast) if self.X_fast is not None else None
                self._cache[key] = (block_sum(b, self.X_normal), bs_f)
            bs_n, bs_f = self._cache[key]
            sum_n += bs_n
            if sum_f is not None:
                sum_f += bs_f
        total = model.n_trees_total
        return sum_n / total, (sum_f / total if sum_f is not None else None)


def _mean_metrics(pred: np.ndarray, trials: Sequence[ProcessedTrial], targets, idxs) -> tuple[float, float]:
    n = CYCLE_SAMPLES
    r2s = []
    rmses = []
    for i in idxs:
        seg = pred[i * n : (i + 1) * n]
        target = targets[trials[i].trial_id]
        r2s.append(r_squared(target, seg))
        rmses.append(rmse(target, seg))
    return float(np.mean(r2s)), float(np.mean(rmses))


def run_protocol(
    base_model: HybridModel,
    normal_trials: Sequence[ProcessedTrial],
    fast_trials: Sequence[ProcessedTrial],
    targets: Mapping[str, np.ndarray],
    seed: int,
    *,
    zeta: float | None = None,
    n_threads: int = 1,
    max_rotations: int | None = None,
    predict_timing_reps: int = 3,
) -> ProtocolReport:
    """Rotation-based incremental adaptation study for one subject.

    For every cyclic ordering of the normal-speed cycles: reset to the base
    model, then for k = 1..L-1 evaluate and selectively adapt on the k-th
    cycle, scoring the remaining L-k normal cycles and all fast cycles after
    each iteration.  Iteration 0 scores the un-adapted base model.  Fast
    cycles are never offered for training.  ``seed`` drives per-rotation
    derived streams, so runs are reproducible for any thread count.
    """
    normal = list(normal_trials)
    fast = list(fast_trials)
    L = len(normal)
    if L < 2:
        raise ValueError(f"need >= 2 normal-speed trials, got {L}")
    for t in normal + fast:
        if t.trial_id not in targets:
            raise KeyError(f"no target for trial {t.trial_id!r}")
    base = base_model if zeta is None else _with_zeta(base_model, zeta)
    subject_id = normal[0].subject_id

    X_normal = _stack_restricted(base, normal)
    X_fast = _stack_restricted(base, fast)
    pool = _PooledPredictor(X_normal, X_fast)

    orders = rotations(list(range(L)))
    if max_rotations is not None:
        orders = orders[:max_rotations]

    rows: list[ProtocolRow] = []
    all_records: list[tuple[UpdateRecord, ...]] = []
    for rot_idx, order in enumerate(orders):
        model = base
        iter_seeds = np.random.SeedSequence(entropy=seed, spawn_key=(rot_idx,)).generate_state(
            max(L - 1, 1), np.uint64
        )
        records: list[UpdateRecord] = []
        timing_X = restrict_features(model, normal[order[0]].features)
        for k in range(L):
            train_ms = 0.0
            updated = False
            if k > 0:
                trial = normal[order[k - 1]]
                model, rec = maybe_update(
                    model,
                    trial,
                    targets[trial.trial_id],
                    seed=int(iter_seeds[k - 1]),
                    k=k,
                    n_threads=n_threads,
                )
                records.append(rec)
                train_ms = rec.train_time_s * 1000.0
                updated = rec.updated

            pred_n, pred_f = pool.pooled(model)
            predict_ms = _time_predict(model, timing_X, predict_timing_reps)
            r2_n, rmse_n = _mean_metrics(pred_n, normal, targets, order[k:])
            rows.append(ProtocolRow(k, rot_idx, "normal", r2_n, rmse_n, updated, train_ms, predict_ms))
            if fast:
                r2_f, rmse_f = _mean_metrics(pred_f, fast, targets, range(len(fast)))
                rows.append(ProtocolRow(k, rot_idx, "fast", r2_f, rmse_f, updated, train_ms, predict_ms))
        all_records.append(tuple(records))

    return ProtocolReport(subject_id=subject_id, rows=tuple(rows), update_records=tuple(all_records))


def _with_zeta(model: HybridModel, zeta: float):
    from dataclasses import replace

    if not (0.0 < zeta <= 1.0):
        raise ValueError(f"zeta must be in (0, 1], got {zeta}")
    return replace(model, zeta=zeta)


def _time_predict(model: HybridModel, X: np.ndarray, reps: int) -> float:
    if reps < 1:
        return 0.0
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        predict(model, X)
        samples.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(samples))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

def wilcoxon_signed_rank(pairs: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; the absolute differences are ranked with
    average ranks for ties and W+ is the rank sum of positive differences.
    For n <= 25 the p-value is exact over all 2^n sign assignments (computed
    by distribution counting); above that a normal approximation with tie
    correction is used.  Returns (W+, two-sided p).
    """
    diffs = np.array([float(a) - float(b) for a, b in pairs])
    diffs = diffs[diffs != 0.0]
    n = diffs.shape[0]
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())

    if n <= 25:
        r2 = np.rint(2.0 * ranks).astype(np.int64)  # doubled ranks are integers
        size = int(r2.sum()) + 1
        counts = np.zeros(size, dtype=np.int64)
        counts[0] = 1
        for r in r2:
            shifted = np.zeros(size, dtype=np.int64)
            shifted[r:] = counts[: size - r]
            counts = counts + shifted
        total = float(2**n)
        w2 = int(round(2.0 * w_plus))
        p_ge = counts[w2:].sum() / total
        p_le = counts[: w2 + 1].sum() / total
        p_two = min(1.0, 2.0 * min(p_ge, p_le))
        return w_plus, float(p_two)

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    var -= float((tie_counts**3 - tie_counts).sum()) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p_two = math.erfc(abs(z) / math.sqrt(2.0))
    return w_plus, float(min(1.0, p_two))


# ---------------------------------------------------------------------------
# timing bench
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    zeta: float
    iteration: int
    n_blocks: int
    n_trees: int
    updated: bool
    fit_ms: float  # nan when no fit happened
    fit_ms_spread: float
    predict_ms: float
    predict_ms_spread: float
    r2: float


@dataclass(frozen=True)
class TimingReport:
    rows: tuple[TimingRow, ...]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [
                    "zeta",
                    "iteration",
                    "n_blocks",
                    "n_trees",
                    "updated",
                    "fit_ms",
                    "fit_ms_spread",
                    "predict_ms",
                    "predict_ms_spread",
                    "r2",
                ]
            )
            for r in self.rows:
                w.writerow(
                    [
                        repr(r.zeta),
                        r.iteration,
                        r.n_blocks,
                        r.n_trees,
                        "true" if r.updated else "false",
                        "" if math.isnan(r.fit_ms) else f"{r.fit_ms:.3f}",
                        "" if math.isnan(r.fit_ms_spread) else f"{r.fit_ms_spread:.3f}",
                        f"{r.predict_ms:.3f}",
                        f"{r.predict_ms_spread:.3f}",
                        repr(r.r2),
                    ]
                )

    def rows_for(self, zeta: float) -> list[TimingRow]:
        return [r for r in self.rows if r.zeta == zeta]


def _median_iqr(samples: list[float]) -> tuple[float, float]:
    arr = np.asarray(samples)
    return float(np.median(arr)), float(np.percentile(arr, 75) - np.percentile(arr, 25))


def timing_bench(
    base_model: HybridModel,
    normal_trials: Sequence[ProcessedTrial],
    targets: Mapping[str, np.ndarray],
    zetas: Sequence[float] = (1.0, 0.99, 0.95, 0.9),
    seed: int = 0,
    *,
    repetitions: int = 30,
    fit_repetitions: int = 5,
    n_threads: int = 1,
) -> TimingReport:
    """Wall-clock study of adaptation-fit and per-trial prediction cost.

    For each threshold, the identity ordering of the normal cycles is
    adapted through once; every iteration reports the median (and IQR) fit
    time over ``fit_repetitions`` refits of the same block, and the median
    per-trial (200-sample) prediction time of the grown model over
    ``repetitions`` runs.
    """
    normal = list(normal_trials)
    if len(normal) < 2:
        raise ValueError("need >= 2 normal-speed trials")
    rows: list[TimingRow] = []
    for zi, zeta in enumerate(zetas):
        model = _with_zeta(base_model, zeta)
        iter_seeds = np.random.SeedSequence(entropy=seed, spawn_key=(zi,)).generate_state(
            len(normal), np.uint64
        )
        timing_X = restrict_features(model, normal[0].features)
        rows.append(_timing_row(model, zeta, 0, False, [math.nan], timing_X, normal, targets, repetitions))
        for k in range(1, len(normal)):
            trial = normal[k - 1]
            fit_seed = int(iter_seeds[k - 1])
            model, rec = maybe_update(
                model, trial, targets[trial.trial_id], seed=fit_seed, k=k, n_threads=n_threads
            )
            fit_samples = [rec.train_time_s * 1000.0]
            if rec.updated:
                X = restrict_features(model, trial.features)
                cfg = model.blocks[-1].config
                for _ in range(max(fit_repetitions - 1, 0)):
                    t0 = time.perf_counter()
                    fit_block(X, np.asarray(targets[trial.trial_id]), cfg, k=len(model.blocks) - 1, n_threads=n_threads)
                    fit_samples.append((time.perf_counter() - t0) * 1000.0)
            else:
                fit_samples = [math.nan]
            rows.append(
                _timing_row(model, zeta, k, rec.updated, fit_samples, timing_X, normal, targets, repetitions)
            )
    return TimingReport(rows=tuple(rows))


def _timing_row(model, zeta, k, updated, fit_samples, timing_X, normal, targets, repetitions) -> TimingRow:
    pred_samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict(model, timing_X)
        pred_samples.append((time.perf_counter() - t0) * 1000.0)
    p_med, p_iqr = _median_iqr(pred_samples)
    if any(math.isnan(s) for s in fit_samples):
        f_med, f_iqr = math.nan, math.nan
    else:
        f_med, f_iqr = _median_iqr(fit_samples)
    held_out = normal[k:] if k < len(normal) else normal[-1:]
    r2s = []
    for t in held_out:
        pred = predict(model, restrict_features(model, t.features))
        r2s.append(r_squared(targets[t.trial_id], pred))
    return TimingRow(
        zeta=zeta,
        iteration=k,
        n_blocks=len(model.blocks),
        n_trees=model.n_trees_total,
        updated=updated,
        fit_ms=f_med,
        fit_ms_spread=f_iqr,
        predict_ms=p_med,
        predict_ms_spread=p_iqr,
        r2=float(np.mean(r2s)),
    )
