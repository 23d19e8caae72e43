"""CPT estimation: counting on complete data, EM with junction-tree smoothing.

Slice-0 priors and tied transition tables are estimated separately. The
E-step runs calibrated junction-tree inference over the unrolled network per
subject (forward and backward information combined), so expected family
counts condition on everything observed anywhere in the sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InconsistentEvidence
from .inference import TreeEngine, compile_junction_tree, unroll, unrolled_tables

DEFAULT_PSEUDOCOUNT = 1.0
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 100
_CHUNK = 512


@dataclass(frozen=True)
class Cpt:
    """One node's table: axes (*parents in listed order, node categories).

    Parents are (name, lag) pairs; lag 0 means the same slice, lag 1 the
    previous slice. Every row must sum to 1 within 1e-9.
    """

    node: str
    parents: tuple[tuple[str, int], ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != len(self.parents) + 1:
            raise ValueError(f"{self.node}: table rank does not match parent count")
        if (table < 0).any():
            raise ValueError(f"{self.node}: negative probability")
        rows = table.reshape(-1, table.shape[-1])
        if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError(f"{self.node}: rows do not sum to 1")
        object.__setattr__(self, "table", table)
        table.flags.writeable = False


@dataclass(frozen=True)
class CptSet:
    priors: dict
    transitions: dict
    pseudocount: float

    def to_json_dict(self) -> dict:
        def dump(cpt: Cpt) -> dict:
            return {
                "parents": [[name, lag] for name, lag in cpt.parents],
                "shape": list(cpt.table.shape),
                "table": [float(x) for x in cpt.table.ravel()],
            }

        return {
            "pseudocount": self.pseudocount,
            "priors": {v: dump(c) for v, c in sorted(self.priors.items())},
            "transitions": {v: dump(c) for v, c in sorted(self.transitions.items())},
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CptSet":
        def load(node: str, payload: dict) -> Cpt:
            table = np.asarray(payload["table"], dtype=float).reshape(payload["shape"])
            parents = tuple((name, int(lag)) for name, lag in payload["parents"])
            return Cpt(node, parents, table)

        return CptSet(
            priors={v: load(v, c) for v, c in d["priors"].items()},
            transitions={v: load(v, c) for v, c in d["transitions"].items()},
            pseudocount=float(d["pseudocount"]),
        )


@dataclass(frozen=True)
class EmTrace:
    iterations: int
    loglik: tuple[float, ...]
    converged: bool
    tol: float

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "loglik": list(self.loglik),
            "converged": self.converged,
            "tol": self.tol,
        }


# ---------------------------------------------------------------------------
# Shared layout helpers
# ---------------------------------------------------------------------------


def node_value_array(panel, structure) -> np.ndarray:
    """(n, slice nodes, T) value grid in structure node order; target = labels."""
    var_idx = {v: i for i, v in enumerate(panel.variables)}
    cols = []
    for v in structure.nodes:
        if v == structure.target:
            if panel.labels is None:
                raise ValueError("panel must be labeled")
            cols.append(panel.labels.astype(np.int16))
        else:
            cols.append(panel.cells[:, var_idx[v], :])
    return np.stack(cols, axis=1)


def panel_evidence(net, panel, target: str, t_obs: int | None = None,
                   include_labels: bool = True) -> np.ndarray:
    """Evidence matrix (n subjects, unrolled nodes) with -1 for unobserved.

    ``t_obs`` truncates evidence to timesteps <= t_obs; labels enter as
    evidence on the target copies unless ``include_labels`` is false.
    """
    ev = np.full((panel.n_subjects, net.n_nodes), -1, dtype=np.int16)
    var_idx = {v: i for i, v in enumerate(panel.variables)}
    for j, (v, t) in enumerate(net.names):
        if t_obs is not None and t > t_obs:
            continue
        if v == target:
            if include_labels and panel.labels is not None:
                ev[:, j] = panel.labels[:, t]
        else:
            ev[:, j] = panel.cells[:, var_idx[v], t]
    return ev


def _parent_spec(structure, v: str) -> tuple[tuple[str, int], ...]:
    intra = tuple((p, 0) for p in structure.intra_parents(v))
    inter = tuple((q, 1) for q in structure.inter_parents(v))
    return intra + inter


def _complete_case_counts(values: np.ndarray, cards: list[int]) -> np.ndarray:
    """Counts over family value columns (child last); rows with -1 drop."""
    keep = (values >= 0).all(axis=1)
    kept = values[keep]
    flat = np.zeros(kept.shape[0], dtype=np.int64)
    size = 1
    for j, card in enumerate(cards):
        flat = flat * card + kept[:, j]
        size *= card
    counts = np.bincount(flat, minlength=size).astype(float)
    return counts.reshape(tuple(cards))


def _family_values(v_grid: np.ndarray, structure, v: str, prior: bool) -> tuple[np.ndarray, list[int]]:
    pos = {name: i for i, name in enumerate(structure.nodes)}
    spec = _parent_spec(structure, v)
    if prior:
        spec = tuple((p, lag) for p, lag in spec if lag == 0)
        cols = [v_grid[:, pos[p], 0] for p, _ in spec] + [v_grid[:, pos[v], 0]]
    else:
        horizon = v_grid.shape[2]
        cols = []
        for p, lag in spec:
            cols.append(np.concatenate([v_grid[:, pos[p], t - lag] for t in range(1, horizon)]))
        cols.append(np.concatenate([v_grid[:, pos[v], t] for t in range(1, horizon)]))
    cards = [int(structure.cards[p]) for p, _ in spec] + [int(structure.cards[v])]
    return np.stack(cols, axis=1), cards


def _normalize(counts: np.ndarray, pseudocount: float, card: int) -> np.ndarray:
    num = counts + pseudocount
    denom = num.sum(axis=-1, keepdims=True)
    uniform = np.full_like(num, 1.0 / card)
    with np.errstate(invalid="ignore"):
        table = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), uniform)
    return table


def _counts_to_cptset(structure, prior_counts, trans_counts, pseudocount) -> CptSet:
    priors, transitions = {}, {}
    for v in structure.nodes:
        card = int(structure.cards[v])
        spec = _parent_spec(structure, v)
        prior_spec = tuple((p, lag) for p, lag in spec if lag == 0)
        priors[v] = Cpt(v, prior_spec, _normalize(prior_counts[v], pseudocount, card))
        transitions[v] = Cpt(v, spec, _normalize(trans_counts[v], pseudocount, card))
    return CptSet(priors=priors, transitions=transitions, pseudocount=pseudocount)


def _count_all_families(structure, v_grid: np.ndarray):
    prior_counts, trans_counts = {}, {}
    single_slice = v_grid.shape[2] < 2
    for v in structure.nodes:
        vals, cards = _family_values(v_grid, structure, v, prior=True)
        prior_counts[v] = _complete_case_counts(vals, cards)
        if single_slice:
            spec = _parent_spec(structure, v)
            shape = tuple(int(structure.cards[p]) for p, _ in spec) + (int(structure.cards[v]),)
            trans_counts[v] = np.zeros(shape)
        else:
            vals, cards = _family_values(v_grid, structure, v, prior=False)
            trans_counts[v] = _complete_case_counts(vals, cards)
    return prior_counts, trans_counts


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def mle_fit(structure, panel, pseudocount: float = DEFAULT_PSEUDOCOUNT) -> CptSet:
    """Counting estimate: row = (count + pseudocount) / (total + pseudocount * r).

    Intended for complete panels; incomplete rows fall back to family-wise
    complete-case counting. Unobserved parent configurations get uniform rows.
    """
    v_grid = node_value_array(panel, structure)
    prior_counts, trans_counts = _count_all_families(structure, v_grid)
    return _counts_to_cptset(structure, prior_counts, trans_counts, pseudocount)


def _perturb(cpts: CptSet, structure, seed: int) -> CptSet:
    """Multiply rows by seeded (1 +/- 1%) noise and renormalize."""
    rng = np.random.default_rng([seed, 31])
    priors, transitions = {}, {}
    for group_in, group_out in ((cpts.priors, priors), (cpts.transitions, transitions)):
        for v in structure.nodes:
            cpt = group_in[v]
            noise = 1.0 + 0.01 * rng.uniform(-1.0, 1.0, size=cpt.table.shape)
            table = cpt.table * noise
            table = table / table.sum(axis=-1, keepdims=True)
            group_out[v] = Cpt(v, cpt.parents, table)
    return CptSet(priors=priors, transitions=transitions, pseudocount=cpts.pseudocount)


def em_fit(
    structure,
    panel,
    pseudocount: float = DEFAULT_PSEUDOCOUNT,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    chunk: int = _CHUNK,
) -> tuple[CptSet, EmTrace]:
    """EM over missing feature cells with junction-tree smoothing.

    The E-step calibrates the unrolled network per subject given its observed
    cells and labels, accumulating expected family counts; the M-step
    re-normalizes with the pseudocount. Initialization is the complete-case
    counting estimate perturbed by seeded +/-1% noise. Stops when the relative
    observed-data log-likelihood change drops below ``tol``.
    """
    horizon = panel.horizon
    net = unroll(structure, horizon)
    engine = TreeEngine(compile_junction_tree(net))
    evidence = panel_evidence(net, panel, structure.target)

    # Initialization smooths even when the requested pseudocount is 0: a
    # complete-case zero in theta0 would make its own evidence impossible at
    # the first E-step. M-steps use the configured pseudocount.
    init_pseudocount = pseudocount if pseudocount > 0 else 0.5
    theta = _perturb(mle_fit(structure, panel, init_pseudocount), structure, seed)
    lls: list[float] = []
    converged = False

    node_is_prior = [t == 0 for _, t in net.names]
    node_name = [v for v, _ in net.names]

    for _ in range(max_iter):
        engine.set_tables(unrolled_tables(structure, theta, horizon))
        prior_counts = {
            v: np.zeros_like(theta.priors[v].table) for v in structure.nodes
        }
        trans_counts = {
            v: np.zeros_like(theta.transitions[v].table) for v in structure.nodes
        }
        total_ll = 0.0
        for start in range(0, panel.n_subjects, chunk):
            rows = slice(start, min(start + chunk, panel.n_subjects))
            calib = engine.propagate(evidence[rows])
            if not calib.ok.all():
                bad = start + int(np.flatnonzero(~calib.ok)[0])
                raise InconsistentEvidence(
                    f"subject {panel.subject_ids[bad]} has zero-probability evidence"
                )
            total_ll += float(calib.logz.sum())
            for j in range(net.n_nodes):
                fam = engine.family_marginal(calib, j).sum(axis=0)
                if node_is_prior[j]:
                    prior_counts[node_name[j]] += fam
                else:
                    trans_counts[node_name[j]] += fam
        lls.append(total_ll)
        theta = _counts_to_cptset(structure, prior_counts, trans_counts, pseudocount)
        if len(lls) >= 2:
            prev = lls[-2]
            rel = abs(lls[-1] - prev) / max(abs(prev), 1e-12)
            if rel < tol:
                converged = True
                break

    trace = EmTrace(
        iterations=len(lls), loglik=tuple(lls), converged=converged, tol=tol
    )
    return theta, trace


def observed_loglik(structure, cpts: CptSet, panel, chunk: int = _CHUNK) -> float:
    """Sum over subjects of log P(observed cells and labels)."""
    horizon = panel.horizon
    net = unroll(structure, horizon)
    engine = TreeEngine(compile_junction_tree(net))
    engine.set_tables(unrolled_tables(structure, cpts, horizon))
    evidence = panel_evidence(net, panel, structure.target)
    total = 0.0
    for start in range(0, panel.n_subjects, chunk):
        logz = engine.loglik(evidence[start : start + chunk])
        if np.isneginf(logz).any():
            bad = start + int(np.flatnonzero(np.isneginf(logz))[0])
            raise InconsistentEvidence(
                f"subject {panel.subject_ids[bad]} has zero-probability evidence"
            )
        total += float(logz.sum())
    return total


def write_cpts_json(cpts: CptSet, trace: EmTrace | None, path) -> None:
    payload = cpts.to_json_dict()
    payload["em_trace"] = None if trace is None else trace.to_json_dict()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
