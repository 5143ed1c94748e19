"""Command-line frontend wiring the pipeline end to end.

Exit codes: 1 for usage problems, 2 for data validation failures, 3 for
runtime failures.  Every stochastic command takes an explicit --seed and is
idempotent: identical flags produce byte-identical outputs (wall-clock
timing fields aside).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    FEATURE_COLUMNS,
    Dataset,
    GaitDataError,
    SubjectMeta,
    TrialRecord,
    load_manifest,
    read_trial_csv,
    save_dataset,
    validate_dataset,
)
from .evaluation import (
    AllZeroDifferences,
    grid_search_cv,
    run_protocol,
    timing_bench,
    wilcoxon_signed_rank,
)
from .forest import ForestConfig, feature_importances, fit_block, select_features
from .hybrid import (
    HybridError,
    NoSpeedMatch,
    fit_base,
    load_model,
    maybe_update,
    normative_target,
    predict,
    restrict_features,
    save_model,
)
from .signal import FilterSpec, SignalError, build_feature_matrix, process_dataset
from .synth import DEFAULT_PARAMS, DEFAULT_SPEEDS, gen_dataset


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_common(p: _Parser, *, seed: bool = True, threads: bool = True) -> None:
    p.add_argument("--config", help="key=value file supplying defaults; flags win")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="master RNG seed (required)")
    if threads:
        p.add_argument("--threads", type=int, default=1, help="worker threads for tree fitting")


def _add_filter_flags(p: _Parser) -> None:
    p.add_argument("--cutoff", type=float, default=6.0, help="low-pass cutoff in Hz")
    p.add_argument("--filter-order", type=int, default=2, help="Butterworth order per pass")
    p.add_argument("--single-pass", action="store_true", help="causal filtering instead of zero-phase")
    p.add_argument("--filter-first", action="store_true", help="filter before resampling (sensitivity check)")
    p.add_argument("--filter-target", action="store_true", help="also low-pass the torque target")


def build_parser() -> _Parser:
    parser = _Parser(prog="gaitorque", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--able", type=int, default=30)
    p.add_argument("--amputee", type=int, default=0)
    p.add_argument("--speeds", default=",".join(str(s) for s in DEFAULT_SPEEDS))
    p.add_argument("--trials-per-speed", type=int, default=1)
    p.add_argument("--normal-cycles", type=int, default=8)
    p.add_argument("--fast-cycles", type=int, default=3)
    p.add_argument("--sigma", type=float, default=DEFAULT_PARAMS.noise_sigma)
    p.add_argument("-o", "--out", required=False, default=None)
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gridsearch", help="subject-wise cross-validated hyper-parameter search")
    p.add_argument("--data", default=None)
    p.add_argument("--dmax-grid", default="4,6,10,20,50,100")
    p.add_argument("--ntrees-grid", default="10,20,50,100,500,1000")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--features", default=None, help="comma-separated feature names")
    p.add_argument("-o", "--out", default=None, help="output CSV path")
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("importance", help="impurity importances and cumulative feature selection")
    p.add_argument("--data", default=None)
    p.add_argument("--ntrees", type=int, default=50)
    p.add_argument("--dmax", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.98)
    p.add_argument("-o", "--out", default=None, help="output JSON path")
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("train-base", help="fit the shared base model on able-bodied trials")
    p.add_argument("--data", default=None)
    p.add_argument("--dmax", type=int, default=6)
    p.add_argument("--ntrees", type=int, default=100)
    p.add_argument("--zeta", type=float, default=0.99)
    p.add_argument("--adapt-dmax", type=int, default=10)
    p.add_argument("--adapt-ntrees", type=int, default=None)
    p.add_argument("--features", default=None, help="comma-separated feature names")
    p.add_argument("--feature-file", default=None, help="JSON from the importance command")
    p.add_argument("-o", "--out", default=None)
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("adapt", help="selectively update a model on one subject's normal cycles")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--subject", default=None)
    p.add_argument("--zeta", type=float, default=None, help="override the model's threshold")
    p.add_argument("--dmax", type=int, default=None, help="override adaptation tree depth")
    p.add_argument("--ntrees", type=int, default=None, help="override adaptation tree count")
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--log", default=None, help="optional update-log CSV path")
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict", help="predict a 200-sample torque trajectory for one trial CSV")
    p.add_argument("--model", default=None)
    p.add_argument("--trial", default=None)
    p.add_argument("--raw", action="store_true", help="trial CSV is raw-rate (has time_s)")
    p.add_argument("--cycle-duration", type=float, default=1.0)
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--l-thigh", type=float, default=None)
    p.add_argument("--l-shank", type=float, default=None)
    p.add_argument("--l-foot", type=float, default=None)
    p.add_argument("-o", "--out", default=None, help="output CSV (stdout when omitted)")
    _add_filter_flags(p)
    _add_common(p, seed=False, threads=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="rotation-based incremental adaptation study")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--subjects", default="amputee", help="'amputee', 'able', 'all', or comma-separated ids")
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--rotations", type=int, default=None, help="cap the number of rotations")
    p.add_argument("-o", "--out", default=None, help="output directory")
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="train/predict latency study across update thresholds")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--subject", default=None, help="subject id (default: first amputee)")
    p.add_argument("--zetas", default="1.0,0.99,0.95,0.9")
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--fit-repetitions", type=int, default=5)
    p.add_argument("-o", "--out", default=None)
    _add_filter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require(ns, parser_prog: str, **named) -> None:
    for flag, value in named.items():
        if value is None:
            raise _UsageError(f"--{flag.replace('_', '-')} is required")


def _filter_spec(ns) -> FilterSpec:
    return FilterSpec(cutoff=ns.cutoff, order=ns.filter_order, zero_phase=not ns.single_pass)


def _load_processed(ns) -> tuple[Dataset, Dataset]:
    path = Path(ns.data)
    if path.is_dir():
        path = path / "manifest.json"
    dataset = load_manifest(path)
    violations = validate_dataset(dataset)
    if violations:
        raise GaitDataError("validation failed: " + "; ".join(str(v) for v in violations))
    processed = process_dataset(
        dataset, _filter_spec(ns), filter_first=ns.filter_first, filter_target=ns.filter_target
    )
    return dataset, processed


def _able_trials(processed: Dataset):
    cohorts = {s.id: s.cohort for s in processed.subjects}
    return [t for t in processed.trials if cohorts[t.subject_id] == "able"]


def _parse_features(ns) -> tuple[str, ...] | None:
    names = None
    if getattr(ns, "feature_file", None):
        doc = json.loads(Path(ns.feature_file).read_text())
        names = tuple(doc["selected"])
    if getattr(ns, "features", None):
        names = tuple(s.strip() for s in ns.features.split(",") if s.strip())
    if names:
        for n in names:
            if n not in FEATURE_COLUMNS:
                raise _UsageError(f"unknown feature {n!r}; choose from {', '.join(FEATURE_COLUMNS)}")
    return names


def _subject_targets(processed: Dataset, subject_id: str) -> dict[str, np.ndarray]:
    """Training/validation targets for one subject's trials.

    Able subjects use their own measured mass-normalized torque; amputees
    use the normative trajectory at each trial's speed.
    """
    meta = processed.subject(subject_id)
    able = _able_trials(processed)
    out: dict[str, np.ndarray] = {}
    for t in processed.trials_of(subject_id):
        if meta.cohort == "able":
            out[t.trial_id] = np.asarray(t.target)
        else:
            out[t.trial_id] = normative_target(able, t.speed)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(ns) -> int:
    _require(ns, "synth", seed=ns.seed, out=ns.out)
    speeds = tuple(float(s) for s in ns.speeds.split(","))
    params = replace(DEFAULT_PARAMS, noise_sigma=ns.sigma)
    dataset = gen_dataset(
        ns.able,
        ns.amputee,
        speeds,
        ns.trials_per_speed,
        ns.seed,
        params,
        amputee_normal_cycles=ns.normal_cycles,
        amputee_fast_cycles=ns.fast_cycles,
    )
    manifest = save_dataset(dataset, ns.out)
    print(f"wrote {len(dataset.subjects)} subjects, {len(dataset.trials)} trials to {manifest}")
    return 0


def cmd_gridsearch(ns) -> int:
    _require(ns, "gridsearch", seed=ns.seed, data=ns.data, out=ns.out)
    _, processed = _load_processed(ns)
    dgrid = [int(s) for s in ns.dmax_grid.split(",")]
    ngrid = [int(s) for s in ns.ntrees_grid.split(",")]
    grid = [(d, n) for d in dgrid for n in ngrid]
    result = grid_search_cv(
        _able_trials(processed),
        grid,
        k=ns.folds,
        seed=ns.seed,
        feature_set=_parse_features(ns),
        n_threads=ns.threads,
    )
    result.write_csv(ns.out)
    for cell, r2v in zip(result.cells, result.mean_r2):
        print(f"d_max={cell[0]:>4d} n_trees={cell[1]:>5d} mean_r2={r2v:.4f}")
    print(f"best: d_max={result.best[0]} n_trees={result.best[1]}")
    return 0


def cmd_importance(ns) -> int:
    _require(ns, "importance", seed=ns.seed, data=ns.data, out=ns.out)
    _, processed = _load_processed(ns)
    able = _able_trials(processed)
    X = np.vstack([np.asarray(t.features) for t in able])
    y = np.concatenate([np.asarray(t.target) for t in able])
    block = fit_block(
        X,
        y,
        ForestConfig(n_trees=ns.ntrees, d_max=ns.dmax, seed=ns.seed),
        k=0,
        n_threads=ns.threads,
        feature_names=FEATURE_COLUMNS,
    )
    imp = feature_importances(block)
    selected = select_features(imp, ns.threshold)
    doc = {
        "feature_names": list(FEATURE_COLUMNS),
        "importances": [float(v) for v in imp],
        "threshold": ns.threshold,
        "selected": [FEATURE_COLUMNS[i] for i in selected],
    }
    Path(ns.out).write_text(json.dumps(doc, indent=2) + "\n")
    for name, v in sorted(zip(FEATURE_COLUMNS, imp), key=lambda kv: -kv[1]):
        marker = "*" if name in doc["selected"] else " "
        print(f"{marker} {name:<13s} {v:.4f}")
    print(f"selected {len(doc['selected'])} features covering >= {ns.threshold:.2f} importance -> {ns.out}")
    return 0


def cmd_train_base(ns) -> int:
    _require(ns, "train-base", seed=ns.seed, data=ns.data, out=ns.out)
    _, processed = _load_processed(ns)
    able = _able_trials(processed)
    model = fit_base(
        able,
        h0=(ns.dmax, ns.ntrees),
        feature_set=_parse_features(ns),
        seed=ns.seed,
        zeta=ns.zeta,
        adapt_d_max=ns.adapt_dmax,
        adapt_n_trees=ns.adapt_ntrees,
        n_threads=ns.threads,
    )
    save_model(model, ns.out)
    print(
        f"base model: {model.blocks[0].n_trees} trees, depth<={model.blocks[0].config.d_max}, "
        f"features={','.join(model.feature_names)}, zeta={model.zeta} -> {ns.out}"
    )
    return 0


def cmd_adapt(ns) -> int:
    _require(ns, "adapt", seed=ns.seed, model=ns.model, data=ns.data, subject=ns.subject, out=ns.out)
    model = load_model(ns.model)
    if ns.zeta is not None:
        model = replace(model, zeta=ns.zeta)
    _, processed = _load_processed(ns)
    trials = processed.trials_of(ns.subject, speed_class="normal")
    if not trials:
        raise GaitDataError(f"no normal-speed trials for subject {ns.subject!r}")
    targets = _subject_targets(processed, ns.subject)
    seeds = np.random.SeedSequence(entropy=ns.seed).generate_state(len(trials), np.uint64)
    records = []
    for k, trial in enumerate(trials, start=1):
        model, rec = maybe_update(
            model,
            trial,
            targets[trial.trial_id],
            seed=int(seeds[k - 1]),
            k=k,
            d_max=ns.dmax,
            n_trees=ns.ntrees,
            n_threads=ns.threads,
        )
        records.append(rec)
        alpha = "-" if rec.alpha_k is None else f"{rec.alpha_k:.4f}"
        print(
            f"k={rec.k} trial={rec.trial_id} pre_r2={rec.pre_update_r2:.4f} "
            f"updated={str(rec.updated).lower()} alpha={alpha}"
        )
    save_model(model, ns.out)
    print(f"{sum(r.updated for r in records)}/{len(records)} updates -> {ns.out}")
    if ns.log:
        import csv as _csv

        with open(ns.log, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["k", "trial_id", "pre_update_r2", "updated", "alpha_k", "trees_added", "train_ms"])
            for r in records:
                w.writerow(
                    [
                        r.k,
                        r.trial_id,
                        repr(r.pre_update_r2),
                        "true" if r.updated else "false",
                        "" if r.alpha_k is None else repr(r.alpha_k),
                        r.trees_added,
                        f"{r.train_time_s * 1000.0:.3f}",
                    ]
                )
    return 0


def cmd_predict(ns) -> int:
    _require(ns, "predict", model=ns.model, trial=ns.trial)
    model = load_model(ns.model)
    needs_anthro = any(n.startswith("l_") for n in model.feature_names)
    if needs_anthro and None in (ns.l_thigh, ns.l_shank, ns.l_foot):
        raise _UsageError("model uses anthropometric features; pass --l-thigh, --l-shank, --l-foot")
    subject = SubjectMeta(
        id="cli",
        mass=ns.mass,
        l_thigh=ns.l_thigh if ns.l_thigh is not None else 1.0,
        l_shank=ns.l_shank if ns.l_shank is not None else 1.0,
        l_foot=ns.l_foot if ns.l_foot is not None else 1.0,
        cohort="able",
    )
    channels = read_trial_csv(ns.trial, raw=ns.raw)
    trial = TrialRecord(
        subject_id="cli",
        trial_id=Path(ns.trial).stem,
        speed=1.0,
        speed_class="normal",
        cycle_duration=ns.cycle_duration,
        channels=channels,
        raw=ns.raw,
    )
    processed = build_feature_matrix(
        trial, subject, _filter_spec(ns), filter_first=ns.filter_first, filter_target=ns.filter_target
    )
    pred = predict(model, restrict_features(model, processed.features))
    lines = ["sample_index,tau_pred_Nmkg"]
    lines += [f"{i},{float(pred[i])!r}" for i in range(len(pred))]
    text = "\n".join(lines) + "\n"
    if ns.out:
        Path(ns.out).write_text(text)
        print(f"wrote {len(pred)} predictions to {ns.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(ns) -> int:
    _require(ns, "eval", seed=ns.seed, model=ns.model, data=ns.data, out=ns.out)
    base = load_model(ns.model)
    _, processed = _load_processed(ns)
    subjects = _select_subjects(processed, ns.subjects)
    out_dir = Path(ns.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary: dict = {"zeta": ns.zeta if ns.zeta is not None else base.zeta, "subjects": {}}
    curves: dict[int, list[float]] = {}
    per_pair_r2: dict[tuple[str, int], dict[int, float]] = {}
    for si, sid in enumerate(subjects):
        normal = processed.trials_of(sid, speed_class="normal")
        fast = processed.trials_of(sid, speed_class="fast")
        if len(normal) < 2:
            print(f"skipping {sid}: fewer than 2 normal-speed trials")
            continue
        targets = _subject_targets(processed, sid)
        report = run_protocol(
            base,
            normal,
            fast,
            targets,
            seed=int(np.random.SeedSequence(entropy=ns.seed, spawn_key=(si,)).generate_state(1, np.uint64)[0]),
            zeta=ns.zeta,
            n_threads=ns.threads,
            max_rotations=ns.rotations,
        )
        report.write_csv(out_dir / f"report_{sid}.csv")
        med = report.median_r2("normal")
        summary["subjects"][sid] = {
            "normal_median_r2": {str(k): v for k, v in med.items()},
            "updates": report.updates_total(),
            "rotations": len(report.update_records),
        }
        if fast:
            summary["subjects"][sid]["fast_median_r2"] = {
                str(k): v for k, v in report.median_r2("fast").items()
            }
        for row in report.rows:
            if row.split == "normal":
                curves.setdefault(row.iteration, []).append(row.r2)
                per_pair_r2.setdefault((sid, row.rotation), {})[row.iteration] = row.r2

    summary["normal_median_r2"] = {str(k): float(np.median(v)) for k, v in sorted(curves.items())}
    summary["wilcoxon_successive"] = _successive_wilcoxon(per_pair_r2)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, v in sorted(curves.items()):
        print(f"iteration {k}: median normal r2 = {float(np.median(v)):.4f}")
    print(f"reports -> {out_dir}")
    return 0


def _successive_wilcoxon(per_pair_r2) -> list[dict]:
    if not per_pair_r2:
        return []
    iterations = sorted({k for d in per_pair_r2.values() for k in d})
    out = []
    for k_prev, k_next in zip(iterations, iterations[1:]):
        pairs = [
            (d[k_next], d[k_prev]) for d in per_pair_r2.values() if k_prev in d and k_next in d
        ]
        entry = {"from": k_prev, "to": k_next, "n": len(pairs)}
        try:
            w, p = wilcoxon_signed_rank(pairs)
            entry["w_plus"] = w
            entry["p_two_sided"] = p
        except AllZeroDifferences:
            entry["w_plus"] = None
            entry["p_two_sided"] = None
        out.append(entry)
    return out


def _select_subjects(processed: Dataset, spec: str) -> list[str]:
    if spec in ("amputee", "able"):
        return [s.id for s in processed.subjects if s.cohort == spec]
    if spec == "all":
        return [s.id for s in processed.subjects]
    ids = [s.strip() for s in spec.split(",") if s.strip()]
    known = {s.id for s in processed.subjects}
    for sid in ids:
        if sid not in known:
            raise GaitDataError(f"unknown subject {sid!r}")
    return ids


def cmd_bench(ns) -> int:
    _require(ns, "bench", seed=ns.seed, model=ns.model, data=ns.data, out=ns.out)
    base = load_model(ns.model)
    _, processed = _load_processed(ns)
    sid = ns.subject
    if sid is None:
        amputees = [s.id for s in processed.subjects if s.cohort == "amputee"]
        if not amputees:
            raise GaitDataError("no amputee subjects; pass --subject explicitly")
        sid = amputees[0]
    normal = processed.trials_of(sid, speed_class="normal")
    targets = _subject_targets(processed, sid)
    zetas = [float(s) for s in ns.zetas.split(",")]
    report = timing_bench(
        base,
        normal,
        targets,
        zetas,
        seed=ns.seed,
        repetitions=ns.repetitions,
        fit_repetitions=ns.fit_repetitions,
        n_threads=ns.threads,
    )
    report.write_csv(ns.out)
    for zeta in zetas:
        rows = report.rows_for(zeta)
        fit_vals = [r.fit_ms for r in rows if r.updated]
        fit_med = float(np.median(fit_vals)) if fit_vals else float("nan")
        print(
            f"zeta={zeta}: updates={sum(r.updated for r in rows)} "
            f"median_fit_ms={fit_med:.2f} final_predict_ms={rows[-1].predict_ms:.2f}"
        )
    print(f"bench -> {ns.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _apply_config(ns, argv: list[str]) -> None:
    if not getattr(ns, "config", None):
        return
    path = Path(ns.config)
    if not path.is_file():
        raise _UsageError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _UsageError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        value = value.strip()
        if not hasattr(ns, dest):
            raise _UsageError(f"{path}:{lineno}: unknown option {key.strip()!r}")
        flag = "--" + dest.replace("_", "-")
        given = any(tok == flag or tok.startswith(flag + "=") for tok in argv)
        if given:
            continue
        setattr(ns, dest, _coerce(value))


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        _apply_config(ns, argv)
        return ns.func(ns)
    except _UsageError as e:
        sys.stderr.write(f"gaitorque: error: {e}\n")
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except (GaitDataError, NoSpeedMatch, SignalError) as e:
        sys.stderr.write(f"gaitorque: data error: {e}\n")
        return 2
    except (HybridError, ValueError, OSError, KeyError) as e:
        sys.stderr.write(f"gaitorque: runtime error: {e}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
