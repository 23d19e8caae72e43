"""Ground-truth panel sampling for tests, demos, and acceptance runs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import DiscretePanel
from .params import Cpt, CptSet
from .structure import InterEdge, InterEdges, IntraDag, TwoSliceStructure, assemble_2tbn


@dataclass(frozen=True)
class GeneratorSpec:
    """Known 2-TBN plus sampling knobs; missingness never touches labels."""

    structure: TwoSliceStructure
    cpts: CptSet
    n_subjects: int
    horizon: int
    missing_rate: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing rate must be in [0, 1)")
        if self.horizon < 2 or self.n_subjects < 1:
            raise ValueError("need horizon >= 2 and at least one subject")


def _draw_categories(rng, probs: np.ndarray) -> np.ndarray:
    """Vectorized categorical draw: probs has shape (n, card)."""
    u = rng.random(probs.shape[0])
    cumulative = probs.cumsum(axis=1)
    idx = (u[:, None] > cumulative).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int16)


def sample_panel(spec: GeneratorSpec) -> DiscretePanel:
    """Ancestral sampling slice by slice; labels come from the target node."""
    st, cpts = spec.structure, spec.cpts
    nodes = st.nodes
    pos = {v: i for i, v in enumerate(nodes)}
    n, horizon = spec.n_subjects, spec.horizon
    rng = np.random.default_rng([spec.seed, 23])

    values = np.zeros((n, len(nodes), horizon), dtype=np.int16)
    for t in range(horizon):
        source = cpts.priors if t == 0 else cpts.transitions
        for v in nodes:
            cpt = source[v]
            card = int(st.cards[v])
            table = cpt.table.reshape(-1, card)
            config = np.zeros(n, dtype=np.int64)
            for parent, lag in cpt.parents:
                config = config * int(st.cards[parent]) + values[:, pos[parent], t - lag]
            values[:, pos[v], t] = _draw_categories(rng, table[config])

    features = [v for v in nodes if v != st.target]
    cells = np.stack([values[:, pos[v], :] for v in features], axis=1)
    labels = values[:, pos[st.target], :].astype(np.int8)
    if spec.missing_rate > 0:
        mask_rng = np.random.default_rng([spec.seed, 29])
        mask = mask_rng.random(cells.shape) < spec.missing_rate
        cells = np.where(mask, np.int16(-1), cells)

    width = len(str(n))
    return DiscretePanel(
        subject_ids=tuple(f"s{i:0{width}d}" for i in range(n)),
        variables=tuple(features),
        cards=np.array([int(st.cards[v]) for v in features], dtype=np.int64),
        category_labels=tuple(
            tuple(str(c) for c in range(int(st.cards[v]))) for v in features
        ),
        cells=cells,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Built-in demo truth
# ---------------------------------------------------------------------------


def _peaked_row(card: int, preferred: int, strength: float) -> np.ndarray:
    row = np.full(card, (1.0 - strength) / (card - 1))
    row[preferred] = strength
    return row


def _peaked_table(parent_cards: list[int], card: int, strength: float, rule) -> np.ndarray:
    shape = tuple(parent_cards) + (card,)
    table = np.zeros(shape)
    if not parent_cards:
        return _peaked_row(card, rule(()), strength)
    for config in np.ndindex(*parent_cards):
        table[config] = _peaked_row(card, rule(config), strength)
    return table


def make_demo_truth(strength: float = 0.88) -> tuple[TwoSliceStructure, CptSet]:
    """Fixed 8-feature binary/ternary 2-TBN with strong rows (max >= 0.85).

    Every family rule is a copy/threshold/majority function (no XOR-style
    dependences), so greedy single-parent search gains from each true parent
    individually. Self-persistence inter edges plus one cross edge give the
    inter-slice search a known answer; the outcome depends on two mid-chain
    features and its own past (events may recur).
    """
    features = [f"x{i}" for i in range(8)]
    target = "event"
    nodes = tuple(features + [target])
    cards = {"x0": 2, "x1": 2, "x2": 2, "x3": 2, "x4": 3, "x5": 3, "x6": 2, "x7": 2,
             target: 2}
    intra_parents = {
        "x0": (), "x1": ("x0",), "x2": ("x0",), "x3": ("x1",),
        "x4": ("x2",), "x5": (), "x6": ("x5",), "x7": ("x4",),
        target: ("x3", "x4"),
    }
    inter_pairs = [("x0", "x0"), ("x3", "x3"), ("x5", "x5"), ("x2", "x4"),
                   (target, target)]
    intra = IntraDag(nodes, intra_parents)
    inter = InterEdges(tuple(InterEdge(s, d, 1.0) for s, d in inter_pairs))
    structure = assemble_2tbn(intra, inter, target, cards)

    # Preferred-category rules; transition configs append inter parents after
    # the intra ones, matching the CPT axis convention.
    prior_rules = {
        "x1": lambda c: c[0],
        "x2": lambda c: c[0],
        "x3": lambda c: c[0],
        "x4": lambda c: 2 * c[0],
        "x6": lambda c: min(c[0], 1),
        "x7": lambda c: 1 if c[0] == 2 else 0,
        target: lambda c: 1 if c[0] == 1 and c[1] >= 1 else 0,
    }
    transition_rules = {
        "x0": lambda c: c[0],
        "x1": prior_rules["x1"],
        "x2": prior_rules["x2"],
        "x3": lambda c: 1 if c[0] == 1 and c[1] == 1 else 0,
        "x4": lambda c: min(c[0] + c[1], 2),
        "x5": lambda c: c[0],
        "x6": prior_rules["x6"],
        "x7": prior_rules["x7"],
        target: lambda c: 1 if (c[0] == 1 and c[1] >= 1)
        or (c[2] == 1 and c[0] + min(c[1], 1) >= 1) else 0,
    }

    root_priors = {2: np.array([0.7, 0.3]), 3: np.array([0.5, 0.3, 0.2])}
    priors, transitions = {}, {}
    for v in nodes:
        card = cards[v]
        p_spec = tuple((p, 0) for p in structure.intra_parents(v))
        t_spec = p_spec + tuple((q, 1) for q in structure.inter_parents(v))
        if p_spec:
            p_table = _peaked_table([cards[p] for p, _ in p_spec], card, strength,
                                    prior_rules[v])
        else:
            p_table = root_priors[card].copy()
        priors[v] = Cpt(v, p_spec, p_table)
        if t_spec:
            t_table = _peaked_table([cards[p] for p, _ in t_spec], card, strength,
                                    transition_rules[v])
        else:
            t_table = root_priors[card].copy()
        transitions[v] = Cpt(v, t_spec, t_table)
    return structure, CptSet(priors=priors, transitions=transitions, pseudocount=0.0)


def write_truth_json(spec: GeneratorSpec, path) -> None:
    payload = {
        "structure": spec.structure.to_json_dict(),
        "cpts": spec.cpts.to_json_dict(),
        "n_subjects": spec.n_subjects,
        "horizon": spec.horizon,
        "missing_rate": spec.missing_rate,
        "seed": spec.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth_json(path) -> tuple[TwoSliceStructure, CptSet]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return (
        TwoSliceStructure.from_json_dict(payload["structure"]),
        CptSet.from_json_dict(payload["cpts"]),
    )


def write_panel_csv(panel: DiscretePanel, path) -> None:
    """Emit the dataset CSV format (cells as category indices, blank = missing)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "timestep", *panel.variables, "label"])
        for i, sid in enumerate(panel.subject_ids):
            for t in range(panel.horizon):
                row = [sid, t]
                for k in range(len(panel.variables)):
                    value = panel.cells[i, k, t]
                    row.append("" if value < 0 else int(value))
                row.append(int(panel.labels[i, t]))
                writer.writerow(row)
