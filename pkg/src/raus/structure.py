"""Two-slice structure search: K2 within a slice, REVEAL across slices.

K2 is a greedy order-constrained search maximizing the closed-form marginal
likelihood of each node's parent set; the variable ordering comes from the
rank-learning stage with the outcome node appended last so ranked features
may parent it within a slice. REVEAL picks inter-slice parent sets by
normalized mutual information between slice-t sources and slice-(t+1)
destinations, the same tied edge set for every slice pair.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStructure, ParentSpaceTooLarge
from .ranking import ContingencyTable, mutual_information_bits, _entropy

MISSING = -1
DEFAULT_PARENT_SPACE_CAP = 4096


@dataclass(frozen=True)
class IntraDag:
    """Within-slice DAG: parents of each node precede it in ``nodes``."""

    nodes: tuple[str, ...]
    parents: dict

    def __post_init__(self):
        pos = {v: i for i, v in enumerate(self.nodes)}
        for v, ps in self.parents.items():
            for p in ps:
                if pos[p] >= pos[v]:
                    raise InvalidStructure(f"parent {p} does not precede {v}")

    def parent_tuple(self, node: str) -> tuple[str, ...]:
        return tuple(self.parents.get(node, ()))


@dataclass(frozen=True)
class InterEdge:
    """Directed edge from ``source`` at slice t to ``dest`` at slice t+lag."""

    source: str
    dest: str
    score: float
    lag: int = 1


@dataclass(frozen=True)
class InterEdges:
    edges: tuple[InterEdge, ...]
    skipped: tuple[str, ...] = ()

    def sources_of(self, dest: str) -> tuple[str, ...]:
        return tuple(e.source for e in self.edges if e.dest == dest)

    def as_pairs(self) -> set:
        return {(e.source, e.dest) for e in self.edges}


@dataclass(frozen=True)
class TwoSliceStructure:
    """Stationary 2-TBN: one intra DAG replicated per slice plus tied inter edges."""

    intra: IntraDag
    inter: InterEdges
    target: str
    cards: dict

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.intra.nodes

    def intra_parents(self, node: str) -> tuple[str, ...]:
        return self.intra.parent_tuple(node)

    def inter_parents(self, node: str) -> tuple[str, ...]:
        return self.inter.sources_of(node)

    def to_json_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "target": self.target,
            "cards": {v: int(self.cards[v]) for v in self.nodes},
            "intra_parents": {v: list(self.intra_parents(v)) for v in self.nodes},
            "inter_edges": [
                {"source": e.source, "dest": e.dest, "score": e.score}
                for e in self.inter.edges
            ],
            "skipped_destinations": list(self.inter.skipped),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "TwoSliceStructure":
        intra = IntraDag(tuple(d["nodes"]), {v: tuple(ps) for v, ps in d["intra_parents"].items()})
        inter = InterEdges(
            tuple(
                InterEdge(e["source"], e["dest"], float(e["score"]))
                for e in d["inter_edges"]
            ),
            tuple(d.get("skipped_destinations", ())),
        )
        return assemble_2tbn(intra, inter, d["target"], {v: int(c) for v, c in d["cards"].items()})


# ---------------------------------------------------------------------------
# K2 scoring and search
# ---------------------------------------------------------------------------


def _log_factorial_table(max_n: int) -> np.ndarray:
    """logfact[m] = ln m! for integer m, exact table lookup for the K2 score."""
    table = np.zeros(max_n + 1, dtype=float)
    if max_n >= 1:
        table[1:] = np.cumsum(np.log(np.arange(1, max_n + 1, dtype=float)))
    return table


def _family_counts(
    child: np.ndarray,
    parents: list[np.ndarray],
    child_card: int,
    parent_cards: list[int],
    cap: int,
) -> np.ndarray:
    """Complete-case counts (configs x child categories)."""
    n_config = 1
    for c in parent_cards:
        n_config *= c
        if n_config > cap:
            raise ParentSpaceTooLarge(
                f"{n_config} parent configurations exceed cap {cap}"
            )
    keep = child >= 0
    for p in parents:
        keep &= p >= 0
    child = child[keep]
    config = np.zeros(child.shape[0], dtype=np.int64)
    for p, c in zip(parents, parent_cards):
        config = config * c + p[keep]
    flat = np.bincount(config * child_card + child, minlength=n_config * child_card)
    return flat.reshape(n_config, child_card)


def k2_family_score(counts: np.ndarray) -> float:
    """Cooper-Herskovits log marginal likelihood from a count grid.

    counts has shape (parent configs, child categories); the score is
    sum_j [ ln(r-1)! - ln(N_j + r - 1)! + sum_k ln N_jk! ] computed with an
    integer log-factorial table, never raw factorials.
    """
    n_config, r = counts.shape
    row_totals = counts.sum(axis=1)
    logfact = _log_factorial_table(int(row_totals.max(initial=0)) + r)
    score = n_config * logfact[r - 1] - logfact[row_totals + r - 1].sum()
    score += logfact[counts].sum()
    return float(score)


def k2_node_score(
    child: np.ndarray,
    parents: list[np.ndarray],
    child_card: int,
    parent_cards: list[int],
    cap: int = DEFAULT_PARENT_SPACE_CAP,
) -> float:
    """Score one family on complete cases (rows missing child or a parent drop)."""
    counts = _family_counts(
        np.asarray(child), [np.asarray(p) for p in parents], child_card, list(parent_cards), cap
    )
    return k2_family_score(counts)


def k2_search(
    order: list[str],
    data: np.ndarray,
    cards: dict,
    max_parents: int,
    cap: int = DEFAULT_PARENT_SPACE_CAP,
) -> IntraDag:
    """Greedy K2 under a fixed ordering.

    ``data`` holds one column per node in ``order`` (rows are pooled slice
    instances, -1 missing). Each node greedily adds the single predecessor
    that most increases its family score, stopping when nothing improves or
    max_parents is reached. Ties go to the earliest predecessor in the order.
    """
    columns = {v: data[:, i] for i, v in enumerate(order)}
    parents: dict[str, tuple[str, ...]] = {}
    for i, v in enumerate(order):
        chosen: list[str] = []
        current = k2_node_score(columns[v], [], int(cards[v]), [])
        while len(chosen) < max_parents:
            best_gain, best_cand, best_score = 0.0, None, current
            for cand in order[:i]:
                if cand in chosen:
                    continue
                cand_parents = chosen + [cand]
                score = k2_node_score(
                    columns[v],
                    [columns[p] for p in cand_parents],
                    int(cards[v]),
                    [int(cards[p]) for p in cand_parents],
                    cap,
                )
                if score - current > best_gain:
                    best_gain, best_cand, best_score = score - current, cand, score
            if best_cand is None:
                break
            chosen.append(best_cand)
            current = best_score
        parents[v] = tuple(chosen)
    return IntraDag(tuple(order), parents)


def k2_total_score(dag: IntraDag, data: np.ndarray, cards: dict) -> float:
    """Decomposed total: sum of family scores over the DAG."""
    columns = {v: data[:, i] for i, v in enumerate(dag.nodes)}
    total = 0.0
    for v in dag.nodes:
        ps = dag.parent_tuple(v)
        total += k2_node_score(
            columns[v], [columns[p] for p in ps], int(cards[v]), [int(cards[p]) for p in ps]
        )
    return total


# ---------------------------------------------------------------------------
# REVEAL inter-slice search
# ---------------------------------------------------------------------------


def _joint_counts(cols: list[np.ndarray], cards: list[int], y: np.ndarray, y_card: int):
    keep = y >= 0
    for c in cols:
        keep &= c >= 0
    if not keep.any():
        return None
    config = np.zeros(int(keep.sum()), dtype=np.int64)
    n_config = 1
    for col, card in zip(cols, cards):
        config = config * card + col[keep]
        n_config *= card
    counts = np.bincount(config * y_card + y[keep], minlength=n_config * y_card)
    return counts.reshape(n_config, y_card)


def reveal_search(
    source: np.ndarray,
    dest: np.ndarray,
    node_names: list[str],
    cards: dict,
    max_inter_parents: int = 2,
    accept_ratio: float = 0.9,
    fallback_ratio: float = 0.1,
    allowed_sources: list[str] | None = None,
) -> InterEdges:
    """Normalized-MI parent search for every slice-(t+1) destination.

    ``source``/``dest`` hold aligned transition rows (one column per node in
    ``node_names``, canonical panel order, -1 missing). For each destination
    the candidate sets grow in size until MI(parents; dest)/H(dest) reaches
    ``accept_ratio``; otherwise the single best parent is kept when its
    normalized score reaches ``fallback_ratio``. Candidates enumerate in
    canonical column order, so the result does not depend on any ranking.
    Destinations with zero entropy are skipped and reported.
    """
    col = {v: i for i, v in enumerate(node_names)}
    sources = list(node_names if allowed_sources is None else allowed_sources)
    edges: list[InterEdge] = []
    skipped: list[str] = []

    for v in node_names:
        y = dest[:, col[v]]
        observed = y[y >= 0]
        if observed.size == 0 or _entropy(np.bincount(observed)) == 0.0:
            skipped.append(v)
            continue
        y_card = int(cards[v])

        def normalized_mi(cand: tuple[str, ...]) -> float:
            counts = _joint_counts(
                [source[:, col[u]] for u in cand],
                [int(cards[u]) for u in cand],
                y,
                y_card,
            )
            if counts is None:
                return 0.0
            h_y = _entropy(counts.sum(axis=0))
            if h_y == 0.0:
                return 0.0
            table = ContingencyTable(counts, tuple(range(counts.shape[0])), tuple(range(y_card)))
            return mutual_information_bits(table) / h_y

        accepted: tuple[str, ...] | None = None
        accepted_score = 0.0
        best_single: tuple[tuple[str, ...], float] | None = None
        for size in range(1, max_inter_parents + 1):
            best_set, best_score = None, -1.0
            for cand in itertools.combinations(sources, size):
                score = normalized_mi(cand)
                if score > best_score:
                    best_set, best_score = cand, score
            if size == 1 and best_set is not None:
                best_single = (best_set, best_score)
            if best_set is not None and best_score >= accept_ratio:
                accepted, accepted_score = best_set, best_score
                break
        if accepted is None and best_single is not None and best_single[1] >= fallback_ratio:
            accepted, accepted_score = best_single
        if accepted:
            for u in accepted:
                edges.append(InterEdge(u, v, accepted_score))
    return InterEdges(tuple(edges), tuple(skipped))


def transition_matrices(panel, node_names: list[str], target: str):
    """Aligned (slice t, slice t+1) rows pooled over t for REVEAL."""
    horizon = panel.horizon
    var_idx = {v: i for i, v in enumerate(panel.variables)}

    def slice_matrix(ts):
        cols = []
        for v in node_names:
            if v == target:
                cols.append(np.concatenate([panel.labels[:, t] for t in ts]))
            else:
                cols.append(np.concatenate([panel.cells[:, var_idx[v], t] for t in ts]))
        return np.stack(cols, axis=1)

    src = slice_matrix(range(horizon - 1))
    dst = slice_matrix(range(1, horizon))
    return src, dst


def slice_instance_matrix(panel, node_names: list[str], target: str) -> np.ndarray:
    """Pooled per-(subject, timestep) rows over all slices for K2."""
    var_idx = {v: i for i, v in enumerate(panel.variables)}
    cols = []
    for v in node_names:
        if v == target:
            cols.append(panel.labels.ravel())
        else:
            cols.append(panel.cells[:, var_idx[v], :].ravel())
    return np.stack(cols, axis=1)


def assemble_2tbn(
    intra: IntraDag, inter: InterEdges, target: str, cards: dict
) -> TwoSliceStructure:
    """Validate and bundle the stationary structure.

    Checks the shared node universe, that every inter edge crosses exactly
    one slice forward, and that the two-slice unrolling is acyclic.
    """
    universe = set(intra.nodes)
    if target not in universe:
        raise InvalidStructure(f"target {target} not among nodes")
    for e in inter.edges:
        if e.source not in universe or e.dest not in universe:
            raise InvalidStructure(f"inter edge {e.source}->{e.dest} leaves the node universe")
        if e.lag != 1:
            raise InvalidStructure(
                f"inter edge {e.source}->{e.dest} has lag {e.lag}; edges must cross one slice forward"
            )
    if set(cards) != universe:
        raise InvalidStructure("cards must cover exactly the node universe")

    # Unrolled acyclicity over two slices via Kahn's algorithm.
    nodes = [(v, s) for s in (0, 1) for v in intra.nodes]
    incoming = {nd: set() for nd in nodes}
    for s in (0, 1):
        for v in intra.nodes:
            for p in intra.parent_tuple(v):
                incoming[(v, s)].add((p, s))
    for e in inter.edges:
        incoming[(e.dest, 1)].add((e.source, 0))
    ready = [nd for nd, inc in incoming.items() if not inc]
    seen = 0
    while ready:
        nd = ready.pop()
        seen += 1
        for other, inc in incoming.items():
            if nd in inc:
                inc.discard(nd)
                if not inc:
                    ready.append(other)
    if seen != len(nodes):
        raise InvalidStructure("unrolled graph contains a cycle")
    return TwoSliceStructure(intra, inter, target, dict(cards))


def write_structure_json(structure: TwoSliceStructure, settings: dict, path) -> None:
    payload = structure.to_json_dict()
    payload["settings"] = settings
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
