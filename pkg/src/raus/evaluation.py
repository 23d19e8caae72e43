"""Metrics, bootstrap CIs, operating points, model selection, error analyses.

Scores are probabilities in [0, 1]; a positive prediction means score >=
threshold (closed lower bound). AUCROC uses the tie-aware rank formulation;
average precision is the stepwise sum over distinct-score cut points with
ties grouped. Both have brute-force twins in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceFailure, UndefinedMetric, UnstableBootstrap

METHOD_TIE_ORDER = {"cv": 0, "chi2": 1, "ig": 2, "lr": 3}
SELECTION_CRITERIA = ("ap_final", "ap_mean", "auc_final")


@dataclass(frozen=True)
class ScoredSet:
    """Paired (score, label) sequences for one (model, window, timestep)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int8)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length vectors")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_neg(self) -> int:
        return int((self.labels == 0).sum())

    def take(self, idx: np.ndarray) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx])


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def from_counts(tp: int, fp: int, tn: int, fn: int) -> "ConfusionMatrix":
        return ConfusionMatrix(tp, fp, tn, fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def tnr(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    @property
    def npv(self) -> float:
        return self.tn / (self.tn + self.fn) if self.tn + self.fn else 0.0

    @property
    def fnr(self) -> float:
        return self.fn / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def to_json_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision": self.precision, "recall": self.recall,
            "tnr": self.tnr, "npv": self.npv, "fnr": self.fnr,
        }


def _require_two_classes(s: ScoredSet) -> None:
    if s.n_pos == 0 or s.n_neg == 0:
        raise UndefinedMetric("need at least one positive and one negative")


def roc_auc(s: ScoredSet) -> float:
    """P(score+ > score-) + 0.5 P(score+ = score-), via tie-averaged ranks."""
    _require_two_classes(s)
    n = len(s)
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(n, dtype=float)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    n_pos, n_neg = s.n_pos, s.n_neg
    rank_sum = float(ranks[s.labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(s: ScoredSet) -> float:
    """Stepwise AP over descending-score cut points; tied scores form one cut."""
    if s.n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = np.argsort(-s.scores, kind="mergesort")
    y = s.labels[order]
    sc = s.scores[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    is_cut = np.ones(len(s), dtype=bool)
    is_cut[:-1] = sc[:-1] != sc[1:]
    cuts = np.flatnonzero(is_cut)
    terms = []
    prev_recall = 0.0
    for e in cuts:
        precision = tp[e] / (tp[e] + fp[e])
        recall = tp[e] / s.n_pos
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


@dataclass(frozen=True)
class BootstrapCi:
    lo: float
    hi: float
    point: float
    n_degenerate: int

    def to_json_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "point": self.point,
                "degenerate_resamples": self.n_degenerate}


def bootstrap_ci(metric_fn, s: ScoredSet, n_resamples: int, seed: int) -> BootstrapCi:
    """Percentile bootstrap (2.5/97.5) over row resamples with replacement.

    Single-class resamples are skipped and counted; more than 50% skipped
    raises UnstableBootstrap. Endpoints are widened to include the point
    estimate so reports always satisfy lo <= point <= hi.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    point = metric_fn(s)
    rng = np.random.default_rng([seed, 13])
    idx = rng.integers(0, len(s), size=(n_resamples, len(s)))
    values = []
    degenerate = 0
    for b in range(n_resamples):
        resample = s.take(idx[b])
        try:
            values.append(metric_fn(resample))
        except UndefinedMetric:
            degenerate += 1
    if degenerate > n_resamples / 2:
        raise UnstableBootstrap(
            f"{degenerate}/{n_resamples} resamples were single-class"
        )
    lo, hi = np.percentile(np.asarray(values), [2.5, 97.5])
    return BootstrapCi(min(float(lo), point), max(float(hi), point), point, degenerate)


def confusion_at_threshold(s: ScoredSet, threshold: float) -> ConfusionMatrix:
    """Counts with positive prediction at score >= threshold."""
    pred = s.scores >= threshold
    pos = s.labels == 1
    return ConfusionMatrix(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    confusion: ConfusionMatrix
    reachable: bool
    target_precision: float
    timestep: int | None = None
    tp_ids: frozenset = frozenset()
    fn_ids: frozenset = frozenset()
    fp_ids: frozenset = frozenset()

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "reachable": self.reachable,
            "target_precision": self.target_precision,
            "timestep": self.timestep,
            "confusion": self.confusion.to_json_dict(),
        }


def threshold_for_precision(s: ScoredSet, target: float) -> OperatingPoint:
    """Pick the observed-score threshold meeting the precision target.

    Among thresholds whose precision reaches the target, the one maximizing
    recall wins (ties: higher precision, then higher threshold). When no
    threshold reaches the target, the closest precision below it is returned
    with reachable=False.
    """
    if not 0.0 < target <= 1.0:
        raise ValueError("target precision must be in (0, 1]")
    candidates = np.unique(s.scores)[::-1]
    qualifying = None
    fallback = None
    for thr in candidates:
        cm = confusion_at_threshold(s, float(thr))
        key = (cm.recall, cm.precision, thr)
        if cm.precision >= target:
            if qualifying is None or key > qualifying[0]:
                qualifying = (key, float(thr), cm)
        fb_key = (cm.precision, cm.recall, thr)
        if fallback is None or fb_key > fallback[0]:
            fallback = (fb_key, float(thr), cm)
    if qualifying is not None:
        _, thr, cm = qualifying
        return OperatingPoint(thr, cm, True, target)
    _, thr, cm = fallback
    return OperatingPoint(thr, cm, False, target)


def with_case_ids(op: OperatingPoint, s: ScoredSet, ids, timestep: int | None = None) -> OperatingPoint:
    """Attach subject ids for the TP/FN/FP cells at this operating point."""
    ids = np.asarray(ids, dtype=object)
    pred = s.scores >= op.threshold
    pos = s.labels == 1
    return replace(
        op,
        timestep=timestep,
        tp_ids=frozenset(ids[pred & pos]),
        fn_ids=frozenset(ids[~pred & pos]),
        fp_ids=frozenset(ids[pred & ~pos]),
    )


# ---------------------------------------------------------------------------
# Reports and selection
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-(method, window) test metrics across prediction timesteps."""

    method: str
    window: int
    auc: dict = field(default_factory=dict)
    auc_ci: dict = field(default_factory=dict)
    ap: dict = field(default_factory=dict)
    operating_point: OperatingPoint | None = None
    selection_rank: int | None = None
    notes: tuple = ()

    @property
    def timesteps(self) -> tuple:
        return tuple(sorted(self.auc))

    def final_timestep(self) -> int | None:
        usable = [t for t in self.timesteps if self.auc[t] is not None]
        return max(usable) if usable else None

    def criterion_value(self, criterion: str) -> float:
        if criterion not in SELECTION_CRITERIA:
            raise ValueError(f"unknown criterion {criterion!r}")
        final = self.final_timestep()
        if final is None:
            return float("-inf")
        if criterion == "auc_final":
            return self.auc[final]
        if criterion == "ap_final":
            value = self.ap.get(final)
            return float("-inf") if value is None else value
        values = [v for v in self.ap.values() if v is not None]
        return float(np.mean(values)) if values else float("-inf")

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "window": self.window,
            "per_timestep": {
                str(t): {
                    "auc": self.auc.get(t),
                    "auc_ci": None
                    if self.auc_ci.get(t) is None
                    else self.auc_ci[t].to_json_dict(),
                    "ap": self.ap.get(t),
                }
                for t in self.timesteps
            },
            "operating_point": None
            if self.operating_point is None
            else self.operating_point.to_json_dict(),
            "selection_rank": self.selection_rank,
            "notes": list(self.notes),
        }


def select_models(reports: list[EvalReport], criterion: str = "ap_final") -> list[EvalReport]:
    """Rank models by the criterion, descending; ties follow cv, chi2, ig order."""
    if not reports:
        raise ValueError("need at least one report")
    order = sorted(
        range(len(reports)),
        key=lambda i: (
            -reports[i].criterion_value(criterion),
            METHOD_TIE_ORDER.get(reports[i].method, 99),
            reports[i].window,
            i,
        ),
    )
    ranked = []
    for rank, i in enumerate(order, start=1):
        reports[i].selection_rank = rank
        ranked.append(reports[i])
    return ranked


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvResult:
    fold_metrics: tuple
    mean: dict
    sd: dict
    skipped: tuple
    fold_subjects: tuple


def cross_validate(panel, k: int, seed: int, pipeline_fn) -> CvResult:
    """Subject-level stratified k-fold over the full pipeline.

    ``pipeline_fn(train_panel, valid_panel)`` returns a flat dict of numeric
    metrics; mean and sd aggregate over completed folds. Folds whose
    validation (or training) side is single-class are skipped and reported.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if panel.labels is None:
        raise ValueError("panel must be labeled")
    ever = panel.labels.max(axis=1) > 0
    chunks = [[] for _ in range(k)]
    for stratum, mask in ((1, ever), (0, ~ever)):
        members = np.flatnonzero(mask)
        rng = np.random.default_rng([seed, 17, stratum])
        perm = rng.permutation(members)
        for fold, part in enumerate(np.array_split(perm, k)):
            chunks[fold].extend(part.tolist())

    fold_metrics, skipped, fold_subjects = [], [], []
    for fold in range(k):
        valid_idx = np.array(sorted(chunks[fold]), dtype=np.int64)
        train_idx = np.array(
            sorted(i for f in range(k) if f != fold for i in chunks[f]), dtype=np.int64
        )
        valid = panel.take(valid_idx)
        train = panel.take(train_idx)
        fold_subjects.append(tuple(valid.subject_ids))
        v_ever = valid.labels.max(axis=1)
        t_ever = train.labels.max(axis=1)
        if len(set(v_ever.tolist())) < 2 or len(set(t_ever.tolist())) < 2:
            skipped.append((fold, "single-class fold"))
            continue
        fold_metrics.append(pipeline_fn(train, valid))

    keys = sorted(set().union(*(m.keys() for m in fold_metrics))) if fold_metrics else []
    mean, sd = {}, {}
    for key in keys:
        values = [m[key] for m in fold_metrics if m.get(key) is not None]
        if values:
            mean[key] = float(np.mean(values))
            sd[key] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return CvResult(tuple(fold_metrics), mean, sd, tuple(skipped), tuple(fold_subjects))


# ---------------------------------------------------------------------------
# Case agreement across windows
# ---------------------------------------------------------------------------


def case_agreement(points: dict) -> tuple[dict, dict]:
    """Venn-region percentages and early-true-positive rates across windows.

    ``points`` maps window -> {"tp": set, "fn": set, "fp": set}. Returns
    (regions, etp): regions[pattern][metric][window] is the percentage of
    that window's set falling in the pattern; patterns cover the triple
    intersection, each two-way region, and "none" (present in that window's
    set only). etp[(long, short)] is |FN_long intersect TP_short| / |FN_long|
    as a percentage, or None when FN_long is empty.
    """
    windows = sorted(points)
    if len(windows) != 3:
        raise ValueError("case agreement expects exactly three windows")
    metrics = ("tp", "fn", "fp")
    patterns = {
        "all": (True, True, True),
        f"not{windows[0]}": (False, True, True),
        f"not{windows[1]}": (True, False, True),
        f"not{windows[2]}": (True, True, False),
    }
    regions: dict = {name: {m: {} for m in metrics} for name in patterns}
    regions["none"] = {m: {} for m in metrics}
    for m in metrics:
        sets = {w: set(points[w][m]) for w in windows}
        for name, mask in patterns.items():
            for wi, w in enumerate(windows):
                if not mask[wi]:
                    regions[name][m][w] = None
                    continue
                region = set(sets[w])
                for wj, other in enumerate(windows):
                    if wj == wi:
                        continue
                    region = region & sets[other] if mask[wj] else region - sets[other]
                denom = len(sets[w])
                regions[name][m][w] = 100.0 * len(region) / denom if denom else None
        for w in windows:
            others = [sets[o] for o in windows if o != w]
            alone = sets[w] - others[0] - others[1]
            denom = len(sets[w])
            regions["none"][m][w] = 100.0 * len(alone) / denom if denom else None

    etp: dict = {}
    for long_w in windows:
        for short_w in windows:
            if short_w >= long_w:
                continue
            fn_long = set(points[long_w]["fn"])
            tp_short = set(points[short_w]["tp"])
            etp[(long_w, short_w)] = (
                100.0 * len(fn_long & tp_short) / len(fn_long) if fn_long else None
            )
    return regions, etp


def compare_distributions(panel, group_mask: np.ndarray, include_statics: bool = True):
    """Cramer's V effect size and chi-squared p per feature vs. group membership.

    Temporal features pool (subject, timestep) cells against the subject's
    group flag; static attributes compare per subject. Degenerate features
    are reported with a null effect size.
    """
    from .ranking import chi_squared, contingency_table, cramers_v
    from .errors import DegenerateVariable, EmptyInput

    group_mask = np.asarray(group_mask, dtype=bool)
    if group_mask.shape != (panel.n_subjects,):
        raise ValueError("group mask must have one flag per subject")
    if not group_mask.any() or group_mask.all():
        raise ValueError("group must be a non-empty proper subset")
    rows = []
    group_codes = group_mask.astype(np.int16)
    for k, var in enumerate(panel.variables):
        x = panel.cells[:, k, :].ravel()
        g = np.repeat(group_codes, panel.horizon)
        try:
            table = contingency_table(x, g, int(panel.cards[k]), 2)
            rows.append(
                {"feature": var, "kind": "temporal",
                 "effect_size": cramers_v(table),
                 "p_value": chi_squared(table).p_value}
            )
        except (DegenerateVariable, EmptyInput) as exc:
            rows.append({"feature": var, "kind": "temporal",
                         "effect_size": None, "p_value": None, "note": str(exc)})
    if include_statics:
        for name, (codes, cats) in sorted(panel.statics.items()):
            try:
                table = contingency_table(codes, group_codes, len(cats), 2)
                rows.append(
                    {"feature": name, "kind": "static",
                     "effect_size": cramers_v(table),
                     "p_value": chi_squared(table).p_value}
                )
            except (DegenerateVariable, EmptyInput) as exc:
                rows.append({"feature": name, "kind": "static",
                             "effect_size": None, "p_value": None, "note": str(exc)})
    return rows


# ---------------------------------------------------------------------------
# Logistic regression baseline
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _nll(w, X, y, l2, pen_mask) -> float:
    z = X @ w
    return float(np.logaddexp(0.0, z).sum() - y @ z + 0.5 * l2 * (w * pen_mask) @ w)


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2: float,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Damped Newton on the penalized negative log-likelihood.

    Column 0 of X is the (unpenalized) intercept. Converges when the gradient
    norm drops below ``tol``; raises ConvergenceFailure past ``max_iter``.
    """
    n, d = X.shape
    w = np.zeros(d)
    pen_mask = np.ones(d)
    pen_mask[0] = 0.0
    for _ in range(max_iter):
        p = _sigmoid(X @ w)
        grad = X.T @ (p - y) + l2 * (w * pen_mask)
        if float(np.linalg.norm(grad)) < tol:
            return w
        weights = np.maximum(p * (1.0 - p), 1e-12)
        hess = X.T @ (X * weights[:, None]) + l2 * np.diag(pen_mask)
        hess[np.diag_indices_from(hess)] += 1e-10
        step = np.linalg.solve(hess, grad)
        base = _nll(w, X, y, l2, pen_mask)
        slope = float(grad @ step)
        scale = 1.0
        while scale > 1e-8:
            cand = w - scale * step
            if _nll(cand, X, y, l2, pen_mask) <= base - 1e-4 * scale * slope:
                break
            scale *= 0.5
        w = w - scale * step
    raise ConvergenceFailure(f"no convergence in {max_iter} Newton iterations")


def _one_hot_with_mode_imputation(cells_t: np.ndarray, cards, modes) -> np.ndarray:
    """Reference-coded one-hot (category 0 absorbed by the intercept)."""
    blocks = [np.ones((cells_t.shape[0], 1))]
    for k in range(cells_t.shape[1]):
        col = cells_t[:, k].copy()
        col[col < 0] = modes[k]
        block = np.zeros((col.size, int(cards[k])))
        block[np.arange(col.size), col] = 1.0
        blocks.append(block[:, 1:])
    return np.concatenate(blocks, axis=1)


def logistic_baseline(
    train, test, lookahead: int, l2: float = 1.0, max_iter: int = 200
) -> dict:
    """Per-timestep L2 logistic models on one-hot categories at timestep t.

    Missing cells are imputed by the per-(variable, timestep) training-set
    mode (a documented simplification of the multiple-imputation program the
    temporal models do not need). Returns {t: ScoredSet}; timesteps whose
    training labels are single-class are omitted.
    """
    out = {}
    for t in range(train.horizon - lookahead):
        ytr = train.labels[:, t + lookahead].astype(float)
        if ytr.min() == ytr.max():
            continue
        modes = []
        for k in range(len(train.variables)):
            col = train.cells[:, k, t]
            observed = col[col >= 0]
            if observed.size == 0:
                modes.append(0)
            else:
                counts = np.bincount(observed, minlength=int(train.cards[k]))
                modes.append(int(counts.argmax()))
        Xtr = _one_hot_with_mode_imputation(train.cells[:, :, t], train.cards, modes)
        w = fit_logistic(Xtr, ytr, l2, max_iter=max_iter)
        Xte = _one_hot_with_mode_imputation(test.cells[:, :, t], test.cards, modes)
        scores = _sigmoid(Xte @ w)
        out[t] = ScoredSet(scores, test.labels[:, t + lookahead])
    return out


# ---------------------------------------------------------------------------
# Event flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventFlow:
    per_timestep: tuple
    transitions: tuple

    def rows(self) -> list[dict]:
        out = []
        for t, (events, non_events) in enumerate(self.per_timestep):
            out.append({"timestep": t, "events": events, "non_events": non_events})
        return out

    def transition_rows(self) -> list[dict]:
        out = []
        for t, grid in enumerate(self.transitions):
            out.append(
                {
                    "from_timestep": t,
                    "to_timestep": t + 1,
                    "non_event_to_non_event": grid[0][0],
                    "non_event_to_event": grid[0][1],
                    "event_to_non_event": grid[1][0],
                    "event_to_event": grid[1][1],
                }
            )
        return out


def event_flow(panel) -> EventFlow:
    """Per-timestep event counts plus 2x2 transition counts for flow diagrams."""
    if panel.labels is None:
        raise ValueError("panel must be labeled")
    labels = panel.labels
    per_t = tuple(
        (int((labels[:, t] == 1).sum()), int((labels[:, t] == 0).sum()))
        for t in range(panel.horizon)
    )
    transitions = []
    for t in range(panel.horizon - 1):
        grid = [[0, 0], [0, 0]]
        src, dst = labels[:, t], labels[:, t + 1]
        for a in (0, 1):
            for b in (0, 1):
                grid[a][b] = int(((src == a) & (dst == b)).sum())
        transitions.append(tuple(tuple(row) for row in grid))
    return EventFlow(per_t, tuple(transitions))
