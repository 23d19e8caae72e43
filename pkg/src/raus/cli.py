"""Command line interface: run, synth, label, report.

``run`` fans out one pipeline per (ranking method, prediction window),
optionally in parallel; results are deterministic given the seed regardless
of parallelism degree because every random draw comes from a substream keyed
by (seed, method, window). Exit codes: 0 success, 1 internal failure,
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from . import dataset as ds
from . import evaluation as ev
from . import pipeline as pl
from . import report as rp
from . import synthgen as sg
from .errors import ConfigError, DataError, ParseError, RausError, SchemaError
from .ranking import Selection

DEFAULT_PRECISION_TARGETS = {24: 0.40, 48: 0.33, 72: 0.20}


@dataclass(frozen=True)
class RunConfig:
    data: str
    out: str
    windows: tuple[int, ...] = (24, 48, 72)
    methods: tuple[str, ...] = ("cv", "chi2", "ig")
    selection: Selection = field(default_factory=lambda: Selection("all"))
    alpha: float = 0.01
    max_parents: int = 3
    max_inter_parents: int = 2
    accept_ratio: float = 0.9
    fallback_ratio: float = 0.1
    pseudocount: float = 1.0
    em_tol: float = 1e-4
    em_max_iter: int = 100
    bootstrap: int = 1000
    seed: int = 0
    split_ratio: float = 0.7
    k_folds: int | None = None
    parallel: int = 1
    discretize: str = "iqr"
    label_mode: str = "column"
    split_aware_bins: bool = False
    static: bool = False
    promote_top_bn: bool = False
    with_lr: bool = False
    label_evidence: bool = True
    forbid_target_inter_source: bool = False
    target_name: str = "event"
    criterion: str = "ap_final"
    lr_l2: float = 1.0
    debug_jtree: bool = False
    precision_targets: dict = field(
        default_factory=lambda: dict(DEFAULT_PRECISION_TARGETS)
    )
    staged: dict = field(default_factory=lambda: {"egfr": list(ds.EGFR_STAGED_EDGES)})

    def validate(self) -> None:
        if not self.windows:
            raise ConfigError("need at least one prediction window")
        for w in self.windows:
            if w <= 0 or w % pl.WINDOW_HOURS_PER_STEP != 0:
                raise ConfigError(f"window {w} must be a positive multiple of 24 hours")
        bad = [m for m in self.methods if m not in ("cv", "chi2", "ig")]
        if bad or not self.methods:
            raise ConfigError(f"methods must be among cv,chi2,ig (got {self.methods})")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split ratio must be in (0, 1)")
        if self.max_parents < 0 or self.max_inter_parents < 0:
            raise ConfigError("parent limits must be nonnegative")
        if not 0.0 < self.accept_ratio <= 1.0 or not 0.0 <= self.fallback_ratio <= 1.0:
            raise ConfigError("REVEAL ratios must be in (0, 1]")
        if self.pseudocount < 0:
            raise ConfigError("pseudocount must be nonnegative")
        if self.em_tol <= 0 or self.em_max_iter < 1:
            raise ConfigError("EM tolerance/iterations out of range")
        if self.bootstrap < 1:
            raise ConfigError("bootstrap resamples must be >= 1")
        if self.k_folds is not None and self.k_folds < 2:
            raise ConfigError("k folds must be >= 2")
        if self.parallel < 1:
            raise ConfigError("parallelism degree must be >= 1")
        if self.discretize not in ("iqr", "none"):
            raise ConfigError("discretize must be iqr or none")
        if self.label_mode not in ("column", "kdigo"):
            raise ConfigError("label mode must be column or kdigo")
        if self.criterion not in ev.SELECTION_CRITERIA:
            raise ConfigError(f"criterion must be one of {ev.SELECTION_CRITERIA}")
        for w in self.windows:
            target = self.precision_targets.get(w)
            if target is None or not 0.0 < target <= 1.0:
                raise ConfigError(f"precision target for window {w} must be in (0, 1]")

    def summary_echo(self) -> dict:
        """Config as stored in summary.json: identical across out dirs and degrees."""
        echo = {
            "data": self.data,
            "windows": list(self.windows),
            "methods": list(self.methods),
            "selection": self.selection.describe(),
            "alpha": self.alpha,
            "max_parents": self.max_parents,
            "max_inter_parents": self.max_inter_parents,
            "accept_ratio": self.accept_ratio,
            "fallback_ratio": self.fallback_ratio,
            "pseudocount": self.pseudocount,
            "em_tol": self.em_tol,
            "em_max_iter": self.em_max_iter,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "k_folds": self.k_folds,
            "discretize": self.discretize,
            "label_mode": self.label_mode,
            "split_aware_bins": self.split_aware_bins,
            "static": self.static,
            "promote_top_bn": self.promote_top_bn,
            "with_lr": self.with_lr,
            "label_evidence": self.label_evidence,
            "forbid_target_inter_source": self.forbid_target_inter_source,
            "target_name": self.target_name,
            "criterion": self.criterion,
            "precision_targets": {str(k): v for k, v in sorted(self.precision_targets.items())},
        }
        return echo


def _cell_task(args):
    """Worker entry: isolate any failure into the cell's result."""
    train, test, method, window, config = args
    try:
        result = pl.run_cell(train, test, method, window, config)
        if config.k_folds:
            cv = ev.cross_validate(
                train, config.k_folds, config.seed,
                pl.fold_metrics_fn(method, window, config),
            )
            result.files["cv_metrics.json"] = (
                "json",
                {
                    "folds": [dict(m) for m in cv.fold_metrics],
                    "mean": cv.mean,
                    "sd": cv.sd,
                    "skipped": [list(s) for s in cv.skipped],
                },
            )
        return result
    except Exception as exc:  # noqa: BLE001 - failures must not sink sibling cells
        return pl.CellResult(method=method, window=window, status="failed", error=str(exc))


def _lr_task(args):
    train, test, window, config = args
    try:
        return pl.run_lr_cell(train, test, window, config)
    except Exception as exc:  # noqa: BLE001
        return pl.CellResult(method="lr", window=window, status="failed", error=str(exc))


def _execute(tasks, worker, degree: int):
    if degree <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=degree) as pool:
        return list(pool.map(worker, tasks))


def run_pipeline(config: RunConfig) -> int:
    """Execute the full run and emit the artifact tree; returns the exit code."""
    created_out = not os.path.exists(config.out)
    try:
        config.validate()
        if os.path.isdir(config.out) and os.listdir(config.out):
            raise ConfigError(f"output directory {config.out} is not empty")
        rp.preflight_out_dir(config.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: cannot write to {config.out}: {exc}", file=sys.stderr)
        return 2

    try:
        prepared = pl.prepare_data(config)
        horizon = prepared.panel.horizon
        for w in config.windows:
            if w // pl.WINDOW_HOURS_PER_STEP >= horizon:
                raise ConfigError(
                    f"window {w}h needs lookahead < horizon T={horizon}"
                )

        train, test = prepared.split.train, prepared.split.test
        pairs = [(m, w) for w in config.windows for m in config.methods]
        promoted: dict = {}
        named: list[tuple[str, pl.CellResult, bool]] = []  # (leaf, result, ranked?)
        if config.promote_top_bn:
            static_config = replace(config, static=True)
            static_results = _execute(
                [(train, test, m, w, static_config) for m, w in pairs],
                _cell_task, config.parallel,
            )
            for r in static_results:
                named.append((f"{r.window}/bn-{r.method}", r, False))
            dbn_pairs = []
            for w in config.windows:
                window_reports = [
                    r.report for r in static_results
                    if r.window == w and r.status == "ok" and r.report is not None
                ]
                if not window_reports:
                    continue
                best = ev.select_models(window_reports, config.criterion)[0]
                promoted[str(w)] = best.method
                dbn_pairs.append((best.method, w))
            dbn_results = _execute(
                [(train, test, m, w, config) for m, w in dbn_pairs],
                _cell_task, config.parallel,
            )
            for r in dbn_results:
                named.append((f"{r.window}/{r.method}", r, True))
            results = static_results + dbn_results
        else:
            results = _execute(
                [(train, test, m, w, config) for m, w in pairs],
                _cell_task, config.parallel,
            )
            for r in results:
                named.append((f"{r.window}/{r.method}", r, True))

        if config.with_lr:
            for r in _execute(
                [(train, test, w, config) for w in config.windows],
                _lr_task, config.parallel,
            ):
                named.append((f"{r.window}/lr", r, False))

        tree: dict = {}
        cells_status: dict = {}
        reports: list[ev.EvalReport] = []
        for name, r, ranked_cell in named:
            cells_status[name] = {"status": r.status, "error": r.error}
            if r.status != "ok":
                continue
            for fname, payload in r.files.items():
                tree[f"{name}/{fname}"] = payload
            if ranked_cell and r.report is not None:
                reports.append(r.report)

        if not any(r.status == "ok" for r in results):
            raise RausError("every (method, window) cell failed")

        ranked = ev.select_models(reports, config.criterion) if reports else []
        models_payload = [
            {
                "method": r.method,
                "window": r.window,
                "rank": r.selection_rank,
                "criterion": config.criterion,
                "value": r.criterion_value(config.criterion),
                "final_timestep": r.final_timestep(),
            }
            for r in ranked
        ]

        agreement_rows = _case_agreement_rows(
            [r for _, r, ranked_cell in named if ranked_cell], config
        )
        if agreement_rows:
            tree["case_agreement.csv"] = (
                "csv",
                (["method", "kind", "pattern", "metric", "window", "percent"], agreement_rows),
            )

        flow_rows = []
        for row in prepared.flow.rows():
            flow_rows.append({"kind": "state", **row})
        for row in prepared.flow.transition_rows():
            flow_rows.append({"kind": "transition", **row})
        flow_fields = ["kind", "timestep", "events", "non_events", "from_timestep",
                       "to_timestep", "non_event_to_non_event", "non_event_to_event",
                       "event_to_non_event", "event_to_event"]
        tree["event_flow.csv"] = ("csv", (flow_fields, flow_rows))
        tree["bins.json"] = ("json", {"specs": [s.to_json_dict() for s in prepared.bin_specs]})
        tree["summary.json"] = (
            "json",
            {
                "config": config.summary_echo(),
                "n_subjects": prepared.panel.n_subjects,
                "horizon": prepared.panel.horizon,
                "train_subjects": train.n_subjects,
                "test_subjects": test.n_subjects,
                "unlabeled_subjects": prepared.unlabeled_subjects,
                "excluded_variables": [list(x) for x in prepared.excluded_variables],
                "significance": [[v, p] for v, p in prepared.significance],
                "retained_variables": prepared.retained,
                "cells": cells_status,
                "models": models_payload,
                "promoted": promoted,
            },
        )
        rp.emit_run_artifacts(tree, config.out)
        return 0
    except ConfigError as exc:
        _cleanup(config.out, created_out)
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ParseError, SchemaError) as exc:
        _cleanup(config.out, created_out)
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        _cleanup(config.out, created_out)
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


def _cleanup(out_dir: str, created: bool) -> None:
    """Remove partial artifacts; keep a pre-existing (empty) directory itself."""
    if not os.path.isdir(out_dir):
        return
    if created:
        shutil.rmtree(out_dir, ignore_errors=True)
        return
    for entry in os.listdir(out_dir):
        path = os.path.join(out_dir, entry)
        if os.path.isdir(path):
            shutil.rmtree(path, ignore_errors=True)
        else:
            os.remove(path)


def _case_agreement_rows(results, config) -> list[dict]:
    if len(config.windows) != 3:
        return []
    rows = []
    for method in config.methods:
        by_window = {
            r.window: r for r in results
            if r.method == method and r.status == "ok" and r.report is not None
            and r.report.operating_point is not None
        }
        if set(by_window) != set(config.windows):
            continue
        points = {
            w: {
                "tp": by_window[w].report.operating_point.tp_ids,
                "fn": by_window[w].report.operating_point.fn_ids,
                "fp": by_window[w].report.operating_point.fp_ids,
            }
            for w in config.windows
        }
        regions, etp = ev.case_agreement(points)
        for pattern in sorted(regions):
            for metric in ("tp", "fn", "fp"):
                for window in sorted(regions[pattern][metric]):
                    pct = regions[pattern][metric][window]
                    rows.append(
                        {
                            "method": method, "kind": "venn", "pattern": pattern,
                            "metric": metric, "window": window,
                            "percent": "" if pct is None else pct,
                        }
                    )
        for (long_w, short_w) in sorted(etp):
            pct = etp[(long_w, short_w)]
            rows.append(
                {
                    "method": method, "kind": "etp",
                    "pattern": f"{long_w}->{short_w}", "metric": "etp",
                    "window": "", "percent": "" if pct is None else pct,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _precision_targets(text: str) -> dict:
    out = {}
    for part in text.split(","):
        window, _, value = part.partition(":")
        out[int(window)] = float(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raus",
        description="Learn, fit, and rank discrete dynamic Bayesian networks "
                    "from longitudinal panels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full pipeline over (method, window) cells")
    run.add_argument("--data", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--config", help="JSON config file; flags override its entries")
    run.add_argument("--windows", type=_int_list, default=None)
    run.add_argument("--methods", type=_str_list, default=None)
    run.add_argument("--selection", default=None,
                     help="all | best_k:K | percentile:P")
    run.add_argument("--alpha", type=float, default=None)
    run.add_argument("--max-parents", type=int, default=None)
    run.add_argument("--max-inter-parents", type=int, default=None)
    run.add_argument("--accept-ratio", type=float, default=None)
    run.add_argument("--fallback-ratio", type=float, default=None)
    run.add_argument("--pseudocount", type=float, default=None)
    run.add_argument("--em-tol", type=float, default=None)
    run.add_argument("--em-max-iter", type=int, default=None)
    run.add_argument("--bootstrap", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--split-ratio", type=float, default=None)
    run.add_argument("--k-folds", type=int, default=None)
    run.add_argument("--parallel", type=int, default=None)
    run.add_argument("--discretize", choices=("iqr", "none"), default=None)
    run.add_argument("--label-mode", choices=("column", "kdigo"), default=None)
    run.add_argument("--split-aware-bins", action="store_true", default=None)
    run.add_argument("--static", action="store_true", default=None)
    run.add_argument("--promote-top-bn", action="store_true", default=None)
    run.add_argument("--with-lr", action="store_true", default=None)
    run.add_argument("--no-label-evidence", action="store_true", default=None)
    run.add_argument("--forbid-target-inter-source", action="store_true", default=None)
    run.add_argument("--target-name", default=None)
    run.add_argument("--criterion", choices=ev.SELECTION_CRITERIA, default=None)
    run.add_argument("--precision-targets", type=_precision_targets, default=None,
                     help="e.g. 24:0.4,48:0.33,72:0.2")
    run.add_argument("--debug-jtree", action="store_true", default=None)

    synth = sub.add_parser("synth", help="sample a panel from the built-in truth")
    synth.add_argument("--subjects", type=int, default=2000)
    synth.add_argument("--horizon", type=int, default=7)
    synth.add_argument("--missing", type=float, default=0.1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="panel CSV path")
    synth.add_argument("--truth-out", default=None, help="truth JSON path")

    label = sub.add_parser("label", help="derive event labels from scr/egfr columns")
    label.add_argument("--data", required=True)
    label.add_argument("--out", required=True)

    report = sub.add_parser("report", help="re-emit DOT and summary from artifacts")
    report.add_argument("--artifacts", required=True)

    return parser


_CONFIG_KEYS = {
    "windows", "methods", "selection", "alpha", "max_parents", "max_inter_parents",
    "accept_ratio", "fallback_ratio", "pseudocount", "em_tol", "em_max_iter",
    "bootstrap", "seed", "split_ratio", "k_folds", "parallel", "discretize",
    "label_mode", "split_aware_bins", "static", "promote_top_bn", "with_lr",
    "label_evidence", "forbid_target_inter_source", "target_name", "criterion",
    "precision_targets", "staged", "lr_l2", "debug_jtree",
}


def config_from_args(args) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        unknown = set(file_conf) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_conf)
    if "windows" in values:
        values["windows"] = tuple(int(w) for w in values["windows"])
    if "methods" in values:
        values["methods"] = tuple(values["methods"])
    if "precision_targets" in values:
        values["precision_targets"] = {int(k): float(v) for k, v in values["precision_targets"].items()}
    if "selection" in values:
        values["selection"] = Selection.parse(values["selection"])

    flags = {
        "windows": args.windows,
        "methods": args.methods,
        "alpha": args.alpha,
        "max_parents": args.max_parents,
        "max_inter_parents": args.max_inter_parents,
        "accept_ratio": args.accept_ratio,
        "fallback_ratio": args.fallback_ratio,
        "pseudocount": args.pseudocount,
        "em_tol": args.em_tol,
        "em_max_iter": args.em_max_iter,
        "bootstrap": args.bootstrap,
        "seed": args.seed,
        "split_ratio": args.split_ratio,
        "k_folds": args.k_folds,
        "parallel": args.parallel,
        "discretize": args.discretize,
        "label_mode": args.label_mode,
        "split_aware_bins": args.split_aware_bins,
        "static": args.static,
        "promote_top_bn": args.promote_top_bn,
        "with_lr": args.with_lr,
        "forbid_target_inter_source": args.forbid_target_inter_source,
        "target_name": args.target_name,
        "criterion": args.criterion,
        "precision_targets": args.precision_targets,
        "debug_jtree": args.debug_jtree,
    }
    for key, value in flags.items():
        if value is not None:
            values[key] = value
    if args.selection is not None:
        try:
            values["selection"] = Selection.parse(args.selection)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if args.no_label_evidence:
        values["label_evidence"] = False

    env_threads = os.environ.get("RAUS_THREADS")
    if env_threads:
        try:
            cap = int(env_threads)
        except ValueError:
            raise ConfigError(f"RAUS_THREADS must be an integer, got {env_threads!r}") from None
        values["parallel"] = min(values.get("parallel", 1), cap) if cap >= 1 else 1

    try:
        config = RunConfig(data=args.data, out=args.out, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    missing_targets = [w for w in config.windows if w not in config.precision_targets]
    if missing_targets:
        targets = dict(config.precision_targets)
        for w in missing_targets:
            targets[w] = 0.4
        config = replace(config, precision_targets=targets)
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    try:
        structure, cpts = sg.make_demo_truth()
        spec = sg.GeneratorSpec(
            structure, cpts, args.subjects, args.horizon, args.missing, args.seed
        )
        panel = sg.sample_panel(spec)
        sg.write_panel_csv(panel, args.out)
        truth_path = args.truth_out or os.path.splitext(args.out)[0] + ".truth.json"
        sg.write_truth_json(spec, truth_path)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {panel.n_subjects} subjects x T={panel.horizon} to {args.out}")
    return 0


def _cmd_label(args) -> int:
    try:
        raw = ds.load_panel(args.data)
        for col in ("scr", "egfr"):
            if col not in raw.variables:
                raise DataError(f"label mode needs a {col!r} column")
        labels, unlabeled = ds.apply_kdigo_labels(raw.column("scr"), raw.column("egfr"))
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", "timestep", *raw.variables, "label"])
            for i, sid in enumerate(raw.subject_ids):
                if unlabeled[i]:
                    continue
                for t in range(raw.horizon):
                    row = [sid, t]
                    for k in range(len(raw.variables)):
                        value = raw.values[i, k, t]
                        row.append("" if value != value else f"{value:g}")
                    row.append(int(labels[i, t]))
                    writer.writerow(row)
    except (DataError, ParseError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"labeled {raw.n_subjects - int(unlabeled.sum())} subjects "
          f"({int(unlabeled.sum())} excluded for missing baseline)")
    return 0


def _cmd_report(args) -> int:
    """Regenerate structure.dot files and summary model ranking from a tree."""
    from .ranking import RankScore, Selection, VariableRanking
    from .structure import TwoSliceStructure

    root = args.artifacts
    if not os.path.isdir(root):
        print(f"data error: no artifact directory {root}", file=sys.stderr)
        return 3
    regenerated = 0
    for window in sorted(os.listdir(root)):
        wdir = os.path.join(root, window)
        if not os.path.isdir(wdir):
            continue
        for method in sorted(os.listdir(wdir)):
            leaf = os.path.join(wdir, method)
            sjson = os.path.join(leaf, "structure.json")
            rcsv = os.path.join(leaf, "rankings.csv")
            if not (os.path.isfile(sjson) and os.path.isfile(rcsv)):
                continue
            with open(sjson, encoding="utf-8") as fh:
                payload = json.load(fh)
            payload.pop("settings", None)
            structure = TwoSliceStructure.from_json_dict(payload)
            with open(rcsv, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            scores = tuple(
                RankScore(r["variable"], r["method"], float(r["statistic"]),
                          None, int(r["rank"]))
                for r in sorted(rows, key=lambda r: int(r["rank"]))
            )
            ranking = VariableRanking(rows[0]["method"], scores, Selection("all"))
            rp.write_text(os.path.join(leaf, "structure.dot"),
                          rp.emit_dot(structure, ranking))
            regenerated += 1
    print(f"regenerated {regenerated} structure.dot files")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        try:
            config = config_from_args(args)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        return run_pipeline(config)
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "label":
        return _cmd_label(args)
    if args.command == "report":
        return _cmd_report(args)
    parser.error("unknown command")
    return 2


if __name__ == "__main__":
    sys.exit(main())
