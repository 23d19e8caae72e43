"""Filter statistics and variable orderings (rank learning).

Three association measures order the variables before structure search:
Cramer's V, the chi-squared statistic, and information gain in bits. All
three operate on pooled (variable value at t, label at t+lookahead) pairs so
a single stationary ordering serves every slice of the temporal model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariable, EmptyInput, NoRankableVariables

METHODS = ("cv", "chi2", "ig")

_GAMMA_TOL = 1e-12
_GAMMA_MAX_ITER = 600


def _reg_gamma_series(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x) by series, for x < a + 1."""
    if x <= 0.0:
        return 0.0
    term = 1.0 / a
    total = term
    n = a
    for _ in range(_GAMMA_MAX_ITER):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * _GAMMA_TOL:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _reg_gamma_cf(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) by continued fraction, x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_TOL:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def reg_upper_gamma(a: float, x: float) -> float:
    """Q(a, x), the chi-squared upper tail building block."""
    if a <= 0.0:
        raise ValueError("a must be positive")
    if x < 0.0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _reg_gamma_series(a, x)))
    return min(1.0, max(0.0, _reg_gamma_cf(a, x)))


def chi2_sf(statistic: float, df: int) -> float:
    """Upper-tail p-value of the chi-squared distribution with df degrees."""
    if df <= 0:
        return 1.0
    return reg_upper_gamma(df / 2.0, statistic / 2.0)


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    row_labels: tuple
    col_labels: tuple

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def dropped_zeros(self) -> "ContingencyTable":
        """Remove all-zero rows and columns."""
        counts = self.counts
        rows = counts.sum(axis=1) > 0
        cols = counts.sum(axis=0) > 0
        return ContingencyTable(
            counts=counts[np.ix_(rows, cols)],
            row_labels=tuple(l for l, keep in zip(self.row_labels, rows) if keep),
            col_labels=tuple(l for l, keep in zip(self.col_labels, cols) if keep),
        )


def contingency_table(
    x: np.ndarray, y: np.ndarray, x_card: int | None = None, y_card: int | None = None
) -> ContingencyTable:
    """Cross-tabulate two integer code arrays, dropping pairs with a missing side."""
    x = np.asarray(x).ravel()
    y = np.asarray(y).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    keep = (x >= 0) & (y >= 0)
    x, y = x[keep].astype(np.int64), y[keep].astype(np.int64)
    if x.size == 0:
        raise EmptyInput("no complete pairs")
    r = x_card if x_card is not None else int(x.max()) + 1
    c = y_card if y_card is not None else int(y.max()) + 1
    counts = np.bincount(x * c + y, minlength=r * c).reshape(r, c)
    return ContingencyTable(counts, tuple(range(r)), tuple(range(c)))


@dataclass(frozen=True)
class Chi2Result:
    statistic: float
    df: int
    p_value: float


def chi_squared(table: ContingencyTable) -> Chi2Result:
    """Pearson chi-squared with p from the regularized incomplete gamma.

    All-zero rows/columns are dropped first; a table that degenerates to a
    single row or column yields statistic 0, df 0, p 1 (non-informative).
    """
    t = table.dropped_zeros()
    counts = t.counts.astype(float)
    if counts.size == 0 or counts.sum() == 0:
        return Chi2Result(0.0, 0, 1.0)
    r, c = counts.shape
    df = (r - 1) * (c - 1)
    if df == 0:
        return Chi2Result(0.0, 0, 1.0)
    n = counts.sum()
    expected = counts.sum(axis=1, keepdims=True) * counts.sum(axis=0, keepdims=True) / n
    statistic = float(((counts - expected) ** 2 / expected).sum())
    return Chi2Result(statistic, df, chi2_sf(statistic, df))


def cramers_v(table: ContingencyTable) -> float:
    """V = sqrt(chi2 / (n * min(r-1, c-1))) on the zero-dropped table."""
    t = table.dropped_zeros()
    r, c = t.counts.shape
    if min(r, c) < 2:
        raise DegenerateVariable("cannot normalize a single-row or single-column table")
    chi2 = chi_squared(table).statistic
    v = math.sqrt(chi2 / (t.counts.sum() * min(r - 1, c - 1)))
    return min(1.0, v)


def _entropy(counts: np.ndarray) -> float:
    counts = counts[counts > 0].astype(float)
    if counts.size == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def info_gain(x: np.ndarray, y: np.ndarray) -> float:
    """IG = H(Y) - H(Y|X) in bits with plug-in probabilities; missing x dropped."""
    table = contingency_table(x, y).counts
    n = table.sum()
    h_y = _entropy(table.sum(axis=0))
    h_y_given_x = 0.0
    for row in table:
        nr = row.sum()
        if nr:
            h_y_given_x += (nr / n) * _entropy(row)
    return max(0.0, h_y - h_y_given_x)


def mutual_information_bits(table: ContingencyTable) -> float:
    """MI(X; Y) in bits from a joint count table."""
    counts = table.counts.astype(float)
    n = counts.sum()
    if n == 0:
        return 0.0
    h_x = _entropy(counts.sum(axis=1))
    h_y = _entropy(counts.sum(axis=0))
    h_xy = _entropy(counts.ravel())
    return max(0.0, h_x + h_y - h_xy)


# ---------------------------------------------------------------------------
# Rankings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Selection:
    """Prefix-selection policy: all ranked, best-k, or a top percentile."""

    kind: str
    value: float | int | None = None

    def count(self, total: int) -> int:
        if self.kind == "all":
            return total
        if self.kind == "best_k":
            return min(int(self.value), total)
        if self.kind == "percentile":
            return min(total, max(1, math.ceil(float(self.value) * total)))
        raise ValueError(f"unknown selection kind {self.kind!r}")

    @staticmethod
    def parse(text: str) -> "Selection":
        if text == "all":
            return Selection("all")
        kind, _, value = text.partition(":")
        if kind == "best_k" and value:
            return Selection("best_k", int(value))
        if kind == "percentile" and value:
            p = float(value)
            if not 0.0 < p <= 1.0:
                raise ValueError("percentile must be in (0, 1]")
            return Selection("percentile", p)
        raise ValueError(f"bad selection {text!r}")

    def describe(self) -> str:
        return self.kind if self.kind == "all" else f"{self.kind}:{self.value}"


@dataclass(frozen=True)
class RankScore:
    variable: str
    method: str
    statistic: float
    p_value: float | None
    rank: int


@dataclass(frozen=True)
class VariableRanking:
    method: str
    scores: tuple[RankScore, ...]
    selection: Selection
    dropped: tuple[str, ...] = ()

    @property
    def ordered_variables(self) -> tuple[str, ...]:
        return tuple(s.variable for s in self.scores)

    @property
    def selected(self) -> tuple[str, ...]:
        return self.ordered_variables[: self.selection.count(len(self.scores))]


def prediction_pairs(panel, lookahead: int) -> tuple[np.ndarray, np.ndarray]:
    """Pool (cell at t, label at t+lookahead) pairs over prediction timesteps.

    Returns (x, y) where x has one column per variable, rows are pooled
    (subject, timestep) instances, and -1 marks missing.
    """
    horizon = panel.horizon
    steps = range(horizon - lookahead)
    xs = [panel.cells[:, :, t] for t in steps]
    ys = [panel.labels[:, t + lookahead] for t in steps]
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def rank_variables(
    panel, lookahead: int, method: str, selection: Selection
) -> VariableRanking:
    """Order variables by one filter statistic, most informative first.

    Degenerate (constant) variables are dropped for every method and reported
    on the ranking. Ties keep the original column order; the selection policy
    applies as a prefix of the ordering.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if panel.labels is None:
        raise ValueError("panel must be labeled before ranking")
    x_all, y = prediction_pairs(panel, lookahead)

    stats: list[tuple[str, float, float | None]] = []
    dropped: list[str] = []
    for k, var in enumerate(panel.variables):
        x = x_all[:, k]
        try:
            table = contingency_table(x, y, int(panel.cards[k]), 2)
        except EmptyInput:
            dropped.append(var)
            continue
        reduced = table.dropped_zeros()
        if min(reduced.counts.shape) < 2:
            dropped.append(var)
            continue
        chi2 = chi_squared(table)
        p_value: float | None = chi2.p_value
        if method == "cv":
            stat = cramers_v(table)
        elif method == "chi2":
            stat = chi2.statistic
        else:
            stat = info_gain(x, y)
            p_value = None
        stats.append((var, float(stat), p_value))

    if not stats:
        raise NoRankableVariables("every variable is degenerate")

    order = sorted(range(len(stats)), key=lambda i: (-stats[i][1], i))
    scores = tuple(
        RankScore(
            variable=stats[i][0],
            method=method,
            statistic=stats[i][1],
            p_value=stats[i][2],
            rank=pos + 1,
        )
        for pos, i in enumerate(order)
    )
    return VariableRanking(method, scores, selection, tuple(dropped))


def rankings_csv_rows(ranking: VariableRanking) -> list[dict]:
    selected = set(ranking.selected)
    rows = []
    for s in ranking.scores:
        rows.append(
            {
                "method": s.method,
                "variable": s.variable,
                "statistic": repr(s.statistic),
                "p_value": "" if s.p_value is None else repr(s.p_value),
                "rank": s.rank,
                "selected": int(s.variable in selected),
            }
        )
    return rows
