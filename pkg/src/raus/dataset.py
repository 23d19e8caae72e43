"""Longitudinal panel ingestion, discretization, labeling, splitting, balancing.

A panel holds per-subject, per-timestep observations over a fixed horizon of
T 24-hour periods. Raw panels carry floats with NaN for missing cells;
discrete panels carry category indices with -1 for missing. Event labels are
binary, defined for every (subject, timestep), and derive either from a label
column or from the creatinine/eGFR labeling rule in :func:`apply_kdigo_labels`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DataError,
    DegenerateVariable,
    EmptyStratum,
    ParseError,
    SchemaError,
    StratumTooSmall,
)

MISSING = -1

#: Fixed eGFR staging thresholds (interior edges; 5 bins, clamped at the ends).
EGFR_STAGED_EDGES = (15.0, 30.0, 45.0, 60.0)
EGFR_STAGED_LABELS = (
    "<15 (Stage 5)",
    "15-29 (Stage 4)",
    "30-44 (Stage 3b)",
    "45-59 (Stage 3a)",
    ">=60",
)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BinningSpec:
    """Resolved binning for one variable.

    For ``kind == "iqr"`` the edges are the bounded quantile edges
    (min, Q1, median, Q3, max after duplicate merge), so the bin count is
    ``len(edges) - 1``. For ``kind == "staged"`` the edges are interior
    thresholds and the bin count is ``len(edges) + 1`` with clamping at both
    ends. ``kind == "categorical"`` marks a passthrough variable that was
    already a category index.
    """

    variable: str
    kind: str
    edges: tuple[float, ...]
    labels: tuple[str, ...]

    @property
    def bins(self) -> int:
        return len(self.labels)

    def interior_edges(self) -> np.ndarray:
        if self.kind == "iqr":
            return np.asarray(self.edges[1:-1], dtype=float)
        if self.kind == "staged":
            return np.asarray(self.edges, dtype=float)
        raise ValueError(f"no interior edges for kind {self.kind!r}")

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Map float values to bin indices; ties at an interior edge go up."""
        codes = np.searchsorted(self.interior_edges(), values, side="right")
        return codes.astype(np.int16)

    def to_json_dict(self) -> dict:
        return {
            "variable": self.variable,
            "kind": self.kind,
            "edges": list(self.edges),
            "labels": list(self.labels),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "BinningSpec":
        return BinningSpec(d["variable"], d["kind"], tuple(d["edges"]), tuple(d["labels"]))


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's raw trajectory: (variable, timestep) -> value, plus statics."""

    subject_id: str
    values: dict
    statics: dict


@dataclass(frozen=True)
class RawPanel:
    """Raw float panel: values[n, k, t] with NaN for missing cells."""

    subject_ids: tuple[str, ...]
    variables: tuple[str, ...]
    values: np.ndarray
    statics: dict = field(default_factory=dict)
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise DataError(f"horizon must be >= 2, got {self.horizon}")
        if len(set(self.variables)) != len(self.variables):
            raise SchemaError("duplicate variable names")
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise DataError("duplicate subject ids")
        _freeze(self.values)
        if self.labels is not None:
            _freeze(self.labels)

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> int:
        return self.values.shape[2]

    def subject_record(self, i: int) -> SubjectRecord:
        vals = {}
        for k, var in enumerate(self.variables):
            for t in range(self.horizon):
                v = self.values[i, k, t]
                vals[(var, t)] = None if math.isnan(v) else float(v)
        statics = {name: col[i] for name, col in self.statics.items()}
        return SubjectRecord(self.subject_ids[i], vals, statics)

    def column(self, variable: str) -> np.ndarray:
        return self.values[:, self.variables.index(variable), :]


@dataclass(frozen=True)
class DiscretePanel:
    """Categorical panel: cells[n, k, t] with -1 for missing.

    ``cards[k]`` is the category count of variable k; ``labels[n, t]`` is the
    binary event label (may be None before labeling). Statics map a name to a
    (codes, category_names) pair of per-subject categories.
    """

    subject_ids: tuple[str, ...]
    variables: tuple[str, ...]
    cards: np.ndarray
    category_labels: tuple[tuple[str, ...], ...]
    cells: np.ndarray
    labels: np.ndarray | None = None
    statics: dict = field(default_factory=dict)

    def __post_init__(self):
        _freeze(self.cells)
        _freeze(self.cards)
        if self.labels is not None:
            _freeze(self.labels)
            if self.labels.shape != (self.n_subjects, self.horizon):
                raise DataError("labels shape mismatch")
        for k in range(len(self.variables)):
            col = self.cells[:, k, :]
            observed = col[col >= 0]
            if observed.size and observed.max() >= self.cards[k]:
                raise DataError(f"category index out of range for {self.variables[k]}")

    @property
    def n_subjects(self) -> int:
        return self.cells.shape[0]

    @property
    def horizon(self) -> int:
        return self.cells.shape[2]

    def with_labels(self, labels: np.ndarray) -> "DiscretePanel":
        return replace(self, labels=np.ascontiguousarray(labels, dtype=np.int8))

    def take(self, idx: np.ndarray, id_suffix: str = "") -> "DiscretePanel":
        """Subject subset (by index array), preserving order of ``idx``."""
        ids = tuple(self.subject_ids[i] + id_suffix for i in idx)
        statics = {
            name: (codes[idx].copy(), cats) for name, (codes, cats) in self.statics.items()
        }
        return DiscretePanel(
            subject_ids=ids,
            variables=self.variables,
            cards=self.cards.copy(),
            category_labels=self.category_labels,
            cells=self.cells[idx].copy(),
            labels=None if self.labels is None else self.labels[idx].copy(),
            statics=statics,
        )


def concat_panels(parts: list[DiscretePanel]) -> DiscretePanel:
    """Stack panels over subjects; ids are deduplicated with a #i suffix."""
    base = parts[0]
    ids = []
    for i, p in enumerate(parts):
        ids.extend(f"{sid}#{i}" for sid in p.subject_ids)
    statics = {}
    for name, (_, cats) in base.statics.items():
        codes = np.concatenate([p.statics[name][0] for p in parts])
        statics[name] = (codes, cats)
    return DiscretePanel(
        subject_ids=tuple(ids),
        variables=base.variables,
        cards=base.cards.copy(),
        category_labels=base.category_labels,
        cells=np.concatenate([p.cells for p in parts], axis=0),
        labels=None
        if base.labels is None
        else np.concatenate([p.labels for p in parts], axis=0),
        statics=statics,
    )


@dataclass(frozen=True)
class SplitResult:
    train: DiscretePanel
    test: DiscretePanel
    seed: int
    ratio: float


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

RESERVED_COLUMNS = ("subject_id", "timestep")
LABEL_COLUMN = "label"
STATIC_PREFIX = "static_"


def load_panel(path) -> RawPanel:
    """Read the panel CSV: header ``subject_id,timestep,<var...>[,label]``.

    Empty fields become missing cells. When several rows share a
    (subject, timestep), the last row read wins, modeling the observation
    closest to the end of the 24-hour period. Columns named ``static_<x>``
    are per-subject attributes (last non-empty value wins).
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaError("duplicate header names")
        if header[:2] != list(RESERVED_COLUMNS):
            raise SchemaError("header must start with subject_id,timestep")

        var_cols, static_cols = [], []
        label_col = None
        for j, name in enumerate(header[2:], start=2):
            if name == LABEL_COLUMN:
                label_col = j
            elif name.startswith(STATIC_PREFIX):
                static_cols.append((j, name[len(STATIC_PREFIX):]))
            else:
                var_cols.append((j, name))
        if not var_cols:
            raise SchemaError("no variable columns")

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno
                )
            sid = row[0].strip()
            if not sid:
                raise ParseError("empty subject_id", line=lineno)
            try:
                t = int(row[1])
            except ValueError:
                raise ParseError(f"bad timestep {row[1]!r}", line=lineno) from None
            if t < 0:
                raise ParseError(f"negative timestep {t}", line=lineno)
            vals = []
            for j, name in var_cols:
                cell = row[j].strip()
                if cell == "":
                    vals.append(math.nan)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"non-numeric value {cell!r} in column {name}", line=lineno
                        ) from None
            label = None
            if label_col is not None:
                cell = row[label_col].strip()
                if cell != "":
                    if cell not in ("0", "1"):
                        raise ParseError(f"label must be 0 or 1, got {cell!r}", line=lineno)
                    label = int(cell)
            statics = {name: row[j].strip() for j, name in static_cols}
            rows.append((sid, t, vals, label, statics))

    if not rows:
        raise DataError("no data rows")

    subject_order = []
    seen = set()
    horizon = 0
    for sid, t, _, _, _ in rows:
        if sid not in seen:
            seen.add(sid)
            subject_order.append(sid)
        horizon = max(horizon, t + 1)

    n, k = len(subject_order), len(var_cols)
    index = {sid: i for i, sid in enumerate(subject_order)}
    values = np.full((n, k, horizon), math.nan, dtype=float)
    labels = np.full((n, horizon), MISSING, dtype=np.int8) if any(
        r[3] is not None for r in rows
    ) else None
    statics_raw: dict[str, list] = {name: [""] * n for _, name in static_cols}
    for sid, t, vals, label, statics in rows:
        i = index[sid]
        values[i, :, t] = vals
        if labels is not None and label is not None:
            labels[i, t] = label
        for name, sval in statics.items():
            if sval != "":
                statics_raw[name][i] = sval

    return RawPanel(
        subject_ids=tuple(subject_order),
        variables=tuple(name for _, name in var_cols),
        values=values,
        statics={name: tuple(col) for name, col in statics_raw.items()},
        labels=labels,
    )


def extract_column_labels(raw: RawPanel) -> np.ndarray:
    """Validate and return the label column as a complete (n, T) array."""
    if raw.labels is None:
        raise DataError("panel has no label column")
    if (raw.labels == MISSING).any():
        n_bad = int((raw.labels == MISSING).any(axis=1).sum())
        raise DataError(f"{n_bad} subjects have timesteps without a label")
    return raw.labels.astype(np.int8)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def _iqr_spec(variable: str, observed: np.ndarray) -> BinningSpec:
    """Quantile edges at {0, .25, .5, .75, 1} with duplicate merge."""
    if np.unique(observed).size < 2:
        raise DegenerateVariable(f"{variable}: fewer than 2 distinct values")
    edges = np.quantile(observed, [0.0, 0.25, 0.5, 0.75, 1.0])
    merged = [float(edges[0])]
    for e in edges[1:]:
        if e > merged[-1]:
            merged.append(float(e))
    if len(merged) < 3:
        raise DegenerateVariable(f"{variable}: quantile edges collapse below 2 bins")
    labels = []
    for lo, hi in zip(merged[:-1], merged[1:]):
        close = "]" if hi == merged[-1] else ")"
        labels.append(f"[{lo:g},{hi:g}{close}")
    return BinningSpec(variable, "iqr", tuple(merged), tuple(labels))


def _categorical_spec(variable: str, observed: np.ndarray) -> BinningSpec:
    cats = np.unique(observed)
    if cats.size < 2:
        raise DegenerateVariable(f"{variable}: fewer than 2 distinct values")
    if not np.all(cats == np.round(cats)) or cats.min() < 0:
        raise DataError(f"{variable}: categorical mode requires nonnegative integers")
    card = int(cats.max()) + 1
    return BinningSpec(variable, "categorical", (), tuple(str(c) for c in range(card)))


def discretize(
    raw: RawPanel,
    policy: dict | None = None,
    fit_mask: np.ndarray | None = None,
) -> tuple[DiscretePanel, list[BinningSpec], list[tuple[str, str]]]:
    """Bin every variable; returns (panel without labels, specs, excluded).

    ``policy`` maps a variable name to either a ready :class:`BinningSpec`
    (staged bins) or one of the strings ``"iqr"`` / ``"categorical"``.
    Unlisted variables default to IQR bins whose edges are the
    {min, Q1, median, Q3, max} quantiles of all non-missing values pooled
    across timesteps (the transition model is stationary, so bins are too).
    ``fit_mask`` restricts edge fitting to a subject subset (split-aware
    mode); assignment still covers everyone and clamps, so test values
    outside the fitted range never error. Degenerate variables are excluded
    and reported as (name, reason) pairs.
    """
    policy = policy or {}
    specs: list[BinningSpec] = []
    excluded: list[tuple[str, str]] = []
    kept_idx: list[int] = []
    columns: list[np.ndarray] = []

    fit_rows = slice(None) if fit_mask is None else fit_mask
    for k, var in enumerate(raw.variables):
        col = raw.values[:, k, :]
        fit_col = col[fit_rows]
        observed = fit_col[~np.isnan(fit_col)]
        rule = policy.get(var, "iqr")
        try:
            if isinstance(rule, BinningSpec):
                spec = rule
            elif rule == "iqr":
                if observed.size == 0:
                    raise DegenerateVariable(f"{var}: no observed values")
                spec = _iqr_spec(var, observed)
            elif rule == "categorical":
                if observed.size == 0:
                    raise DegenerateVariable(f"{var}: no observed values")
                spec = _categorical_spec(var, observed)
            else:
                raise ValueError(f"unknown binning rule {rule!r} for {var}")
        except DegenerateVariable as exc:
            excluded.append((var, str(exc)))
            continue

        codes = np.full(col.shape, MISSING, dtype=np.int16)
        mask = ~np.isnan(col)
        if spec.kind == "categorical":
            codes[mask] = col[mask].astype(np.int16)
            if codes[mask].size and codes[mask].max() >= spec.bins:
                codes[mask] = np.minimum(codes[mask], spec.bins - 1)
        else:
            codes[mask] = spec.assign(col[mask])
        specs.append(spec)
        kept_idx.append(k)
        columns.append(codes)

    if not kept_idx:
        raise DataError("all variables degenerate")

    cells = np.stack(columns, axis=1)
    statics = {}
    for name, raw_col in raw.statics.items():
        cats = tuple(sorted(set(raw_col)))
        lookup = {c: i for i, c in enumerate(cats)}
        codes = np.array([lookup[v] for v in raw_col], dtype=np.int16)
        statics[name] = (codes, cats)

    panel = DiscretePanel(
        subject_ids=raw.subject_ids,
        variables=tuple(raw.variables[k] for k in kept_idx),
        cards=np.array([s.bins for s in specs], dtype=np.int64),
        category_labels=tuple(s.labels for s in specs),
        cells=cells,
        labels=None,
        statics=statics,
    )
    return panel, specs, excluded


def write_bins_json(specs: list[BinningSpec], path) -> None:
    payload = {"specs": [s.to_json_dict() for s in specs]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# KDIGO labeling
# ---------------------------------------------------------------------------

#: Absolute slack absorbing float representation error in the +0.3 criterion.
_DELTA_TOL = 1e-9


def apply_kdigo_labels(
    scr: np.ndarray, egfr: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Label events from creatinine/eGFR series per the KDIGO-style rule.

    ``label[i, t]`` is 1 iff eGFR(t) < 60 and SCr(t) > 1.5 x the admission
    baseline (strict), or SCr rose by >= 0.3 versus some observed value at
    t-1 or t-2 (the 48-hour window). Subjects may re-enter the event state.
    Returns (labels, unlabeled_mask); subjects with no baseline SCr at t0
    are flagged in the mask and get all-zero rows that callers must drop.
    """
    scr = np.asarray(scr, dtype=float)
    egfr = np.asarray(egfr, dtype=float)
    if scr.shape != egfr.shape or scr.ndim != 2:
        raise DataError("scr and egfr must share an (n, T) shape")
    n, horizon = scr.shape
    baseline = scr[:, 0]
    unlabeled = np.isnan(baseline)

    with np.errstate(invalid="ignore"):
        crit1 = (egfr < 60.0) & (scr > 1.5 * baseline[:, None])
        crit2 = np.zeros_like(crit1)
        for w in (1, 2):
            if horizon > w:
                delta = scr[:, w:] - scr[:, :-w]
                crit2[:, w:] |= delta >= 0.3 - _DELTA_TOL
    labels = (crit1 | crit2).astype(np.int8)
    labels[unlabeled] = 0
    return labels, unlabeled


# ---------------------------------------------------------------------------
# Split and balance
# ---------------------------------------------------------------------------


def stratified_split(panel: DiscretePanel, ratio: float, seed: int) -> SplitResult:
    """70:30-style shuffled split stratified by the subject-level ever-event flag."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"ratio must be in (0, 1), got {ratio}")
    if panel.labels is None:
        raise DataError("panel must be labeled before splitting")
    ever = panel.labels.max(axis=1) > 0
    train_idx, test_idx = [], []
    for stratum, mask in (("case", ever), ("control", ~ever)):
        members = np.flatnonzero(mask)
        if members.size < 2:
            raise StratumTooSmall(f"{stratum} stratum has {members.size} subjects")
        rng = np.random.default_rng([seed, 0 if stratum == "case" else 1])
        perm = rng.permutation(members)
        cut = int(members.size * ratio + 0.5)
        train_idx.extend(perm[:cut].tolist())
        test_idx.extend(perm[cut:].tolist())
    train_idx = np.array(sorted(train_idx), dtype=np.int64)
    test_idx = np.array(sorted(test_idx), dtype=np.int64)
    return SplitResult(
        train=panel.take(train_idx),
        test=panel.take(test_idx),
        seed=seed,
        ratio=ratio,
    )


def undersample_balance(
    train: DiscretePanel, lookahead: int, seed: int
) -> tuple[dict[int, DiscretePanel], list[tuple[int, str]]]:
    """Per-prediction-timestep 1:1 case/control subsets with full sequences.

    For each prediction timestep t in [0, T-1-lookahead], the subset keeps
    every case (label at t+lookahead is an event) plus an equal-size seeded
    uniform sample of controls. Timesteps without a single case are omitted
    and reported.
    """
    if train.labels is None:
        raise DataError("panel must be labeled before balancing")
    if not 1 <= lookahead < train.horizon:
        raise DataError(f"lookahead {lookahead} out of range for T={train.horizon}")
    subsets: dict[int, DiscretePanel] = {}
    report: list[tuple[int, str]] = []
    for t in range(train.horizon - lookahead):
        y = train.labels[:, t + lookahead]
        cases = np.flatnonzero(y == 1)
        controls = np.flatnonzero(y == 0)
        if cases.size == 0:
            report.append((t, str(EmptyStratum(f"no cases at prediction timestep {t}"))))
            continue
        rng = np.random.default_rng([seed, 7, t])
        take = min(cases.size, controls.size)
        sampled = rng.choice(controls, size=take, replace=False) if take else controls[:0]
        idx = np.sort(np.concatenate([cases, sampled]))
        subsets[t] = train.take(idx)
    return subsets, report


def significance_filter(
    panel: DiscretePanel, alpha: float
) -> tuple[list[str], list[tuple[str, float]]]:
    """Retain variables whose pooled chi-squared test against the label has p < alpha.

    Pools all (variable, timestep) cells against the same-timestep label,
    dropping missing cells. Returns (retained names, all (name, p) pairs).
    """
    from .ranking import chi_squared, contingency_table

    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must be in (0, 1), got {alpha}")
    if panel.labels is None:
        raise DataError("panel must be labeled before filtering")
    retained, pairs = [], []
    y = np.broadcast_to(panel.labels[:, None, :], panel.cells.shape)
    for k, var in enumerate(panel.variables):
        x = panel.cells[:, k, :].ravel()
        table = contingency_table(x, y[:, k, :].ravel(), int(panel.cards[k]), 2)
        result = chi_squared(table)
        pairs.append((var, result.p_value))
        if result.p_value < alpha:
            retained.append(var)
    return retained, pairs


def select_variables(panel: DiscretePanel, names: list[str]) -> DiscretePanel:
    """Project the panel onto a variable subset (order preserved from ``names``)."""
    idx = [panel.variables.index(n) for n in names]
    return DiscretePanel(
        subject_ids=panel.subject_ids,
        variables=tuple(names),
        cards=panel.cards[idx].copy(),
        category_labels=tuple(panel.category_labels[i] for i in idx),
        cells=panel.cells[:, idx, :].copy(),
        labels=None if panel.labels is None else panel.labels.copy(),
        statics=panel.statics,
    )
