"""End-to-end orchestration of one run: data prep, per-cell learning, evaluation.

A "cell" is one (ranking method, prediction window) pipeline: balance the
training split per prediction timestep, rank variables, learn intra/inter
structure, fit CPTs by EM, then score and bootstrap every prediction
timestep on the held-out test split. Cells are independent and deterministic
given (data, seed, method, window), so they may run in any order or in
parallel without changing a byte of output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import ranking as rk
from . import structure as sl
from .errors import ConfigError, DataError, RausError, UndefinedMetric
from .inference import CompiledDbn, unroll
from .params import CptSet, em_fit, panel_evidence, write_cpts_json
from .report import emit_dot
from .ranking import Selection

WINDOW_HOURS_PER_STEP = 24


def derive_seed(*parts: int) -> int:
    """Stable substream seed from integer coordinates."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)
    return int(state[0] % (2**63))


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    panel: ds.DiscretePanel
    split: ds.SplitResult
    retained: list[str]
    significance: list[tuple[str, float]]
    bin_specs: list[ds.BinningSpec]
    excluded_variables: list[tuple[str, str]]
    unlabeled_subjects: int
    flow: ev.EventFlow


def prepare_data(config) -> PreparedData:
    """Load, label, discretize, split, and filter the input panel."""
    raw = ds.load_panel(config.data)

    unlabeled_count = 0
    if config.label_mode == "kdigo":
        for col in ("scr", "egfr"):
            if col not in raw.variables:
                raise DataError(f"kdigo label mode needs a {col!r} column")
        scr = raw.column("scr")
        egfr = raw.column("egfr")
        labels, unlabeled = ds.apply_kdigo_labels(scr, egfr)
        unlabeled_count = int(unlabeled.sum())
        keep = np.flatnonzero(~unlabeled)
        kept_vars = [v for v in raw.variables if v != "scr"]
        var_idx = [raw.variables.index(v) for v in kept_vars]
        raw = ds.RawPanel(
            subject_ids=tuple(raw.subject_ids[i] for i in keep),
            variables=tuple(kept_vars),
            values=raw.values[np.ix_(keep, var_idx)].copy(),
            statics={n: tuple(c[i] for i in keep) for n, c in raw.statics.items()},
            labels=None,
        )
        labels = labels[keep]
    else:
        labels = ds.extract_column_labels(raw)

    if config.target_name in raw.variables:
        raise ConfigError(
            f"target name {config.target_name!r} collides with a data column"
        )

    policy: dict = {}
    if config.discretize == "none":
        policy = {v: "categorical" for v in raw.variables}
    else:
        for var, edges in config.staged.items():
            if var in raw.variables:
                labels_for = (
                    ds.EGFR_STAGED_LABELS
                    if tuple(edges) == ds.EGFR_STAGED_EDGES
                    else tuple(
                        [f"<{edges[0]:g}"]
                        + [f"{lo:g}-{hi:g}" for lo, hi in zip(edges[:-1], edges[1:])]
                        + [f">={edges[-1]:g}"]
                    )
                )
                policy[var] = ds.BinningSpec(var, "staged", tuple(edges), labels_for)

    fit_mask = None
    if config.split_aware_bins:
        # Edges from the training subjects only: split on labels first.
        ever = labels.max(axis=1) > 0
        probe = ds.DiscretePanel(
            subject_ids=raw.subject_ids,
            variables=("probe",),
            cards=np.array([2]),
            category_labels=(("0", "1"),),
            cells=np.zeros((raw.n_subjects, 1, raw.horizon), dtype=np.int16),
            labels=labels,
        )
        probe_split = ds.stratified_split(probe, config.split_ratio, config.seed)
        train_ids = set(probe_split.train.subject_ids)
        fit_mask = np.array([sid in train_ids for sid in raw.subject_ids])

    panel, specs, excluded = ds.discretize(raw, policy, fit_mask=fit_mask)
    panel = panel.with_labels(labels)

    split = ds.stratified_split(panel, config.split_ratio, config.seed)
    retained, significance = ds.significance_filter(split.train, config.alpha)
    if not retained:
        raise DataError(f"no variables pass the p<{config.alpha} filter")
    flow = ev.event_flow(panel)
    return PreparedData(
        panel=panel,
        split=split,
        retained=retained,
        significance=significance,
        bin_specs=specs,
        excluded_variables=excluded,
        unlabeled_subjects=unlabeled_count,
        flow=flow,
    )


# ---------------------------------------------------------------------------
# One (method, window) cell
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    method: str
    window: int
    status: str
    error: str | None = None
    report: ev.EvalReport | None = None
    files: dict = field(default_factory=dict)
    structure: sl.TwoSliceStructure | None = None
    notes: tuple = ()


def _structure_settings(config) -> dict:
    return {
        "max_parents": config.max_parents,
        "max_inter_parents": config.max_inter_parents,
        "accept_ratio": config.accept_ratio,
        "fallback_ratio": config.fallback_ratio,
    }


def _roc_points(s: ev.ScoredSet, timestep: int) -> list[dict]:
    thresholds = np.unique(s.scores)[::-1]
    n_pos, n_neg = s.n_pos, s.n_neg
    rows = [{"timestep": timestep, "threshold": "", "fpr": 0.0, "tpr": 0.0}]
    for thr in thresholds:
        cm = ev.confusion_at_threshold(s, float(thr))
        rows.append(
            {
                "timestep": timestep,
                "threshold": repr(float(thr)),
                "fpr": cm.fp / n_neg if n_neg else 0.0,
                "tpr": cm.tp / n_pos if n_pos else 0.0,
            }
        )
    return rows


def _pr_points(s: ev.ScoredSet, timestep: int) -> list[dict]:
    thresholds = np.unique(s.scores)[::-1]
    rows = []
    for thr in thresholds:
        cm = ev.confusion_at_threshold(s, float(thr))
        rows.append(
            {
                "timestep": timestep,
                "threshold": repr(float(thr)),
                "recall": cm.recall,
                "precision": cm.precision,
            }
        )
    return rows


def _op_row(op: ev.OperatingPoint) -> dict:
    cm = op.confusion
    return {
        "timestep": op.timestep,
        "target_precision": op.target_precision,
        "threshold": repr(op.threshold),
        "reachable": int(op.reachable),
        "tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn,
        "precision": cm.precision, "recall": cm.recall,
        "tnr": cm.tnr, "npv": cm.npv, "fnr": cm.fnr,
    }


OP_FIELDS = ["timestep", "target_precision", "threshold", "reachable",
             "tp", "fp", "tn", "fn", "precision", "recall", "tnr", "npv", "fnr"]


def build_training_collection(train: ds.DiscretePanel, lookahead: int, seed: int):
    """Concatenated per-timestep balanced subsets (full sequences, multiplicity)."""
    subsets, report = ds.undersample_balance(train, lookahead, seed)
    if not subsets:
        raise DataError(f"no prediction timestep has cases (lookahead {lookahead})")
    collection = ds.concat_panels([subsets[t] for t in sorted(subsets)])
    return collection, report


def learn_cell_model(collection, method, lookahead, config, em_seed):
    """rank -> K2 -> REVEAL -> EM on one balanced training collection."""
    target = config.target_name
    ranking = rk.rank_variables(collection, lookahead, method, config.selection)
    selected = list(ranking.selected)
    order = selected + [target]
    cards = {v: int(collection.cards[list(collection.variables).index(v)]) for v in selected}
    cards[target] = 2

    intra_data = sl.slice_instance_matrix(collection, order, target)
    intra = sl.k2_search(order, intra_data, cards, config.max_parents)

    canonical = [v for v in collection.variables if v in set(selected)] + [target]
    if config.static:
        inter = sl.InterEdges(())
    else:
        src, dst = sl.transition_matrices(collection, canonical, target)
        allowed = canonical if not config.forbid_target_inter_source else [
            v for v in canonical if v != target
        ]
        inter_canonical = sl.reveal_search(
            src, dst, canonical, cards,
            max_inter_parents=config.max_inter_parents,
            accept_ratio=config.accept_ratio,
            fallback_ratio=config.fallback_ratio,
            allowed_sources=allowed,
        )
        inter = inter_canonical
    structure = sl.assemble_2tbn(intra, inter, target, cards)

    fit_panel = ds.select_variables(collection, selected)
    if config.static:
        pairs_x, pairs_y = rk.prediction_pairs(fit_panel, lookahead)
        static_panel = ds.DiscretePanel(
            subject_ids=tuple(f"r{i}" for i in range(pairs_x.shape[0])),
            variables=fit_panel.variables,
            cards=fit_panel.cards.copy(),
            category_labels=fit_panel.category_labels,
            cells=pairs_x[:, :, None],
            labels=pairs_y[:, None].astype(np.int8),
        )
        cpts, trace = em_fit(
            structure, static_panel, config.pseudocount,
            tol=config.em_tol, max_iter=config.em_max_iter, seed=em_seed,
        )
    else:
        cpts, trace = em_fit(
            structure, collection, config.pseudocount,
            tol=config.em_tol, max_iter=config.em_max_iter, seed=em_seed,
        )
    return ranking, structure, cpts, trace


def evaluate_model(structure, cpts, test, lookahead, window, method, config, seed):
    """Score the test split at every prediction timestep; bootstrap the AUC."""
    target = config.target_name
    horizon = test.horizon
    test_view = ds.select_variables(test, [v for v in structure.nodes if v != target])
    eval_horizon = 1 if config.static else horizon
    model = CompiledDbn(structure, eval_horizon)
    model.set_cpts(cpts)
    net = model.net

    report = ev.EvalReport(method=method, window=window)
    roc_rows, pr_rows, op_rows = [], [], []
    scored: dict[int, ev.ScoredSet] = {}
    notes: list[str] = []
    timesteps = [0] if config.static else list(range(horizon - lookahead))
    for t in timesteps:
        if config.static:
            slice_panel = ds.DiscretePanel(
                subject_ids=test_view.subject_ids,
                variables=test_view.variables,
                cards=test_view.cards.copy(),
                category_labels=test_view.category_labels,
                cells=test_view.cells[:, :, t : t + 1].copy(),
                labels=test_view.labels[:, t + lookahead : t + lookahead + 1].copy(),
            )
            evidence = panel_evidence(net, slice_panel, target, t_obs=0,
                                      include_labels=False)
            scores = model.predict_batch(evidence, 0, 0)
        else:
            evidence = panel_evidence(
                net, test_view, target, t_obs=t,
                include_labels=config.label_evidence,
            )
            scores = model.predict_batch(evidence, t, lookahead)
        y = test_view.labels[:, t + lookahead]
        s = ev.ScoredSet(scores, y)
        scored[t] = s
        try:
            ci = ev.bootstrap_ci(
                ev.roc_auc, s, config.bootstrap,
                derive_seed(config.seed, 303, _method_index(method), lookahead, t),
            )
            report.auc[t] = ci.point
            report.auc_ci[t] = ci
            report.ap[t] = ev.average_precision(s)
        except (UndefinedMetric, RausError) as exc:
            report.auc[t] = None
            report.auc_ci[t] = None
            report.ap[t] = None
            notes.append(f"t{t}: {exc}")
            continue
        roc_rows.extend(_roc_points(s, t))
        pr_rows.extend(_pr_points(s, t))
        op = ev.threshold_for_precision(s, config.precision_targets[window])
        op = ev.with_case_ids(op, s, test_view.subject_ids, timestep=t)
        op_rows.append(_op_row(op))
        report.operating_point = op  # final evaluated timestep wins
    report.notes = tuple(notes)
    return report, scored, roc_rows, pr_rows, op_rows


def _method_index(method: str) -> int:
    return {"cv": 0, "chi2": 1, "ig": 2, "lr": 3}[method]


def run_cell(prepared_train, test, method, window, config):
    """Execute one cell end to end and package its artifact files."""
    lookahead = window // WINDOW_HOURS_PER_STEP
    collection, balance_report = build_training_collection(
        prepared_train, lookahead, config.seed
    )
    em_seed = derive_seed(config.seed, 202, _method_index(method), lookahead)
    ranking, structure, cpts, trace = learn_cell_model(
        collection, method, lookahead, config, em_seed
    )
    report, scored, roc_rows, pr_rows, op_rows = evaluate_model(
        structure, cpts, test, lookahead, window, method, config, config.seed
    )

    files = {
        "rankings.csv": (
            "csv",
            (
                ["method", "variable", "statistic", "p_value", "rank", "selected"],
                rk.rankings_csv_rows(ranking),
            ),
        ),
        "structure.json": (
            "json",
            {**structure.to_json_dict(), "settings": _structure_settings(config)},
        ),
        "structure.dot": ("text", emit_dot(structure, ranking)),
        "cpts.json": ("json", {**cpts.to_json_dict(), "em_trace": trace.to_json_dict()}),
        "metrics.json": (
            "json",
            {
                **report.to_json_dict(),
                "settings": {
                    "bootstrap": config.bootstrap,
                    "selection": config.selection.describe(),
                    "pseudocount": config.pseudocount,
                    "em_tol": config.em_tol,
                    "em_max_iter": config.em_max_iter,
                    "label_evidence": config.label_evidence,
                    "static": config.static,
                },
                "balance_report": [list(r) for r in balance_report],
                "deviations": [
                    "bootstrap unit is the test row (subject at a timestep)",
                ],
            },
        ),
        "roc_points.csv": ("csv", (["timestep", "threshold", "fpr", "tpr"], roc_rows)),
        "pr_points.csv": (
            "csv",
            (["timestep", "threshold", "recall", "precision"], pr_rows),
        ),
        "operating_points.csv": ("csv", (OP_FIELDS, op_rows)),
    }
    if config.debug_jtree and not config.static:
        from .inference import compile_junction_tree

        jt = compile_junction_tree(unroll(structure, test.horizon))
        files["jtree.json"] = ("json", jt.to_json_dict())
    return CellResult(
        method=method,
        window=window,
        status="ok",
        report=report,
        files=files,
        structure=structure,
    )


def run_lr_cell(train, test, window, config) -> CellResult:
    """Logistic-regression baseline cell (per-timestep static models)."""
    lookahead = window // WINDOW_HOURS_PER_STEP
    collection, _ = build_training_collection(train, lookahead, config.seed)
    per_t = ev.logistic_baseline(collection, test, lookahead, l2=config.lr_l2)
    report = ev.EvalReport(method="lr", window=window)
    roc_rows, pr_rows, op_rows = [], [], []
    notes = []
    for t in sorted(per_t):
        s = per_t[t]
        try:
            ci = ev.bootstrap_ci(
                ev.roc_auc, s, config.bootstrap,
                derive_seed(config.seed, 303, _method_index("lr"), lookahead, t),
            )
            report.auc[t] = ci.point
            report.auc_ci[t] = ci
            report.ap[t] = ev.average_precision(s)
        except (UndefinedMetric, RausError) as exc:
            report.auc[t] = None
            report.auc_ci[t] = None
            report.ap[t] = None
            notes.append(f"t{t}: {exc}")
            continue
        roc_rows.extend(_roc_points(s, t))
        pr_rows.extend(_pr_points(s, t))
        op = ev.threshold_for_precision(s, config.precision_targets[window])
        op = ev.with_case_ids(op, s, test.subject_ids, timestep=t)
        op_rows.append(_op_row(op))
        report.operating_point = op
    report.notes = tuple(notes)
    files = {
        "metrics.json": (
            "json",
            {
                **report.to_json_dict(),
                "deviations": [
                    "missing cells imputed by per-(variable, timestep) training mode",
                ],
            },
        ),
        "roc_points.csv": ("csv", (["timestep", "threshold", "fpr", "tpr"], roc_rows)),
        "pr_points.csv": (
            "csv",
            (["timestep", "threshold", "recall", "precision"], pr_rows),
        ),
        "operating_points.csv": ("csv", (OP_FIELDS, op_rows)),
    }
    return CellResult(method="lr", window=window, status="ok", report=report, files=files)


def fold_metrics_fn(method, window, config):
    """Pipeline closure for cross_validate: returns final-timestep metrics."""
    lookahead = window // WINDOW_HOURS_PER_STEP

    def run_fold(train, valid):
        collection, _ = build_training_collection(train, lookahead, config.seed)
        em_seed = derive_seed(config.seed, 404, _method_index(method), lookahead)
        _, structure, cpts, _ = learn_cell_model(
            collection, method, lookahead, config, em_seed
        )
        target = config.target_name
        view = ds.select_variables(valid, [v for v in structure.nodes if v != target])
        model = CompiledDbn(structure, valid.horizon)
        model.set_cpts(cpts)
        t_final = valid.horizon - 1 - lookahead
        evidence = panel_evidence(
            model.net, view, target, t_obs=t_final, include_labels=config.label_evidence
        )
        scores = model.predict_batch(evidence, t_final, lookahead)
        s = ev.ScoredSet(scores, view.labels[:, t_final + lookahead])
        out = {}
        try:
            out["auc_final"] = ev.roc_auc(s)
            out["ap_final"] = ev.average_precision(s)
        except UndefinedMetric:
            pass
        return out

    return run_fold
