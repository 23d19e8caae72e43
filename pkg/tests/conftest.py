import numpy as np
import pytest

from raus.dataset import DiscretePanel
from raus.params import Cpt, CptSet
from raus.structure import InterEdge, InterEdges, IntraDag, assemble_2tbn


@pytest.fixture
def chain_structure():
    """A -> B -> C within a slice, no inter edges, C is the outcome."""
    intra = IntraDag(("a", "b", "c"), {"a": (), "b": ("a",), "c": ("b",)})
    return assemble_2tbn(intra, InterEdges(()), "c", {"a": 2, "b": 2, "c": 2})


@pytest.fixture
def chain_cpts():
    """P(A=1)=0.3, P(B=1|A)=0.8/0.2, P(C=1|B)=0.9/0.1."""
    priors = {
        "a": Cpt("a", (), np.array([0.7, 0.3])),
        "b": Cpt("b", (("a", 0),), np.array([[0.8, 0.2], [0.2, 0.8]])),
        "c": Cpt("c", (("b", 0),), np.array([[0.9, 0.1], [0.1, 0.9]])),
    }
    transitions = dict(priors)
    return CptSet(priors=priors, transitions=transitions, pseudocount=0.0)


def make_panel(cells, labels, cards=None, statics=None, variables=None):
    """Small DiscretePanel from plain arrays: cells (n, k, t), labels (n, t)."""
    cells = np.asarray(cells, dtype=np.int16)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int8)
    n, k, _ = cells.shape
    if cards is None:
        cards = [max(2, int(cells[:, j, :].max()) + 1) for j in range(k)]
    if variables is None:
        variables = tuple(f"v{j}" for j in range(k))
    return DiscretePanel(
        subject_ids=tuple(f"s{i}" for i in range(n)),
        variables=tuple(variables),
        cards=np.asarray(cards, dtype=np.int64),
        category_labels=tuple(tuple(str(c) for c in range(card)) for card in cards),
        cells=cells,
        labels=labels,
        statics=statics or {},
    )


def random_2tbn(n_vars, seed, max_card=3):
    """Random structure + CPTs for oracle comparisons."""
    rng = np.random.default_rng(seed)
    names = [f"x{i}" for i in range(n_vars)] + ["y"]
    cards = {v: int(rng.integers(2, max_card + 1)) for v in names}
    parents = {}
    for i, v in enumerate(names):
        k = int(rng.integers(0, min(i, 2) + 1))
        parents[v] = tuple(rng.choice(names[:i], size=k, replace=False)) if k else ()
    intra = IntraDag(tuple(names), parents)
    edges = []
    for v in names:
        if rng.random() < 0.5:
            edges.append(InterEdge(str(rng.choice(names)), v, 0.5))
    structure = assemble_2tbn(intra, InterEdges(tuple(edges)), "y", cards)

    def random_cpt(v, spec):
        shape = tuple(cards[p] for p, _ in spec) + (cards[v],)
        t = rng.random(shape) + 0.05
        return Cpt(v, spec, t / t.sum(-1, keepdims=True))

    priors, transitions = {}, {}
    for v in names:
        intra_spec = tuple((p, 0) for p in structure.intra_parents(v))
        full_spec = intra_spec + tuple((q, 1) for q in structure.inter_parents(v))
        priors[v] = random_cpt(v, intra_spec)
        transitions[v] = random_cpt(v, full_spec)
    return structure, CptSet(priors=priors, transitions=transitions, pseudocount=0.0)
