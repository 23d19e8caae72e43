"""Exact marginals on the unrolled temporal network via junction trees.

The stationary two-slice template is unrolled to the panel horizon, compiled
once (moralize, min-fill triangulate, maximum-weight spanning tree over
separator sizes), and queried many times. Potentials live in linear space
with per-message renormalization and a tracked per-subject log-scale, so
evidence probabilities stay exact without underflow. All propagation carries
a leading batch axis: one junction tree serves every subject in a chunk.

A brute-force joint enumerator over small nets doubles as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    HorizonExceeded,
    InconsistentEvidence,
    OracleTooLarge,
    TreewidthTooLarge,
)

DEFAULT_CLIQUE_STATE_CAP = 10_000_000
ORACLE_STATE_CAP = 2**20


@dataclass(frozen=True)
class UnrolledNet:
    """Horizon-T copy of the template: names[i] = (variable, timestep)."""

    names: tuple[tuple[str, int], ...]
    cards: np.ndarray
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        self.cards.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    def index(self, var: str, t: int) -> int:
        return self.names.index((var, t))


def unroll(structure, horizon: int) -> UnrolledNet:
    """Replicate the two-slice structure across ``horizon`` slices.

    Node order is slice-major; within a slice it follows the structure's node
    order. Transition parents list same-slice (intra) parents first, then
    previous-slice (inter) parents, matching the CPT axis convention.
    """
    slice_nodes = structure.nodes
    pos = {v: i for i, v in enumerate(slice_nodes)}
    s = len(slice_nodes)

    def idx(v: str, t: int) -> int:
        return t * s + pos[v]

    names, parents, cards = [], [], []
    for t in range(horizon):
        for v in slice_nodes:
            names.append((v, t))
            cards.append(int(structure.cards[v]))
            ps = [idx(p, t) for p in structure.intra_parents(v)]
            if t > 0:
                ps += [idx(q, t - 1) for q in structure.inter_parents(v)]
            parents.append(tuple(ps))
    return UnrolledNet(tuple(names), np.asarray(cards, dtype=np.int64), tuple(parents))


def unrolled_tables(structure, cpts, horizon: int) -> list[np.ndarray]:
    """Per-unrolled-node CPT arrays: slice-0 priors, tied transitions after.

    ``cpts`` is duck-typed (``priors``/``transitions`` mapping node name to an
    object with a ``table`` attribute shaped (*parent cards, r)).
    """
    tables = []
    for t in range(horizon):
        source = cpts.priors if t == 0 else cpts.transitions
        for v in structure.nodes:
            tables.append(np.asarray(source[v].table, dtype=float))
    return tables


@dataclass(frozen=True)
class Evidence:
    """Observed assignments (variable, timestep) -> category, cut at ``t_obs``."""

    items: dict
    t_obs: int

    def __post_init__(self):
        for (var, t), value in self.items.items():
            if t > self.t_obs:
                raise ValueError(f"evidence at t={t} exceeds t_obs={self.t_obs}")
            if value < 0:
                raise ValueError(f"negative category for {var}@{t}")

    def as_matrix(self, net: UnrolledNet) -> np.ndarray:
        row = np.full((1, net.n_nodes), -1, dtype=np.int16)
        for (var, t), value in self.items.items():
            i = net.index(var, t)
            if value >= net.cards[i]:
                raise ValueError(f"category {value} out of range for {var}@{t}")
            row[0, i] = value
        return row


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JunctionTree:
    net: UnrolledNet
    cliques: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int], ...]
    separators: tuple[tuple[int, ...], ...]
    assigned_clique: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "cliques": [list(c) for c in self.cliques],
            "edges": [list(e) for e in self.edges],
            "separators": [list(s) for s in self.separators],
            "node_names": [f"{v}@{t}" for v, t in self.net.names],
        }


def _moral_adjacency(net: UnrolledNet) -> list[set]:
    adj = [set() for _ in range(net.n_nodes)]
    for v, ps in enumerate(net.parents):
        family = (*ps, v)
        for a in family:
            for b in family:
                if a != b:
                    adj[a].add(b)
    return adj


def compile_junction_tree(
    net: UnrolledNet, state_cap: int = DEFAULT_CLIQUE_STATE_CAP
) -> JunctionTree:
    """Moralize, triangulate (min-fill, ties to the lowest node index),
    collect maximal cliques, and join them by a maximum-weight spanning tree
    on separator sizes. Fully deterministic for a fixed net."""
    adj = _moral_adjacency(net)
    remaining = set(range(net.n_nodes))
    raw_cliques: list[tuple[int, ...]] = []

    def fill_count(v: int) -> int:
        nbrs = [u for u in adj[v] if u in remaining]
        missing = 0
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                if b not in adj[a]:
                    missing += 1
        return missing

    while remaining:
        v = min(remaining, key=lambda u: (fill_count(u), u))
        nbrs = [u for u in adj[v] if u in remaining]
        raw_cliques.append(tuple(sorted([v, *nbrs])))
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                adj[a].add(b)
                adj[b].add(a)
        remaining.discard(v)

    cliques: list[tuple[int, ...]] = []
    for cand in raw_cliques:
        cset = set(cand)
        if any(cset <= set(kept) for kept in cliques):
            continue
        cliques = [kept for kept in cliques if not set(kept) < cset]
        cliques.append(cand)
    cliques.sort()

    for c in cliques:
        states = int(np.prod(net.cards[list(c)]))
        if states > state_cap:
            raise TreewidthTooLarge(
                f"clique {c} has {states} states (cap {state_cap})"
            )

    n_c = len(cliques)
    candidates = []
    for i in range(n_c):
        si = set(cliques[i])
        for j in range(i + 1, n_c):
            w = len(si & set(cliques[j]))
            candidates.append((-w, i, j))
    candidates.sort()
    parent_uf = list(range(n_c))

    def find(x: int) -> int:
        while parent_uf[x] != x:
            parent_uf[x] = parent_uf[parent_uf[x]]
            x = parent_uf[x]
        return x

    edges, separators = [], []
    for negw, i, j in candidates:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        parent_uf[ri] = rj
        edges.append((i, j))
        separators.append(tuple(sorted(set(cliques[i]) & set(cliques[j]))))
        if len(edges) == n_c - 1:
            break

    assigned = []
    for v in range(net.n_nodes):
        family = set(net.parents[v]) | {v}
        home = next(i for i, c in enumerate(cliques) if family <= set(c))
        assigned.append(home)

    return JunctionTree(
        net=net,
        cliques=tuple(cliques),
        edges=tuple(edges),
        separators=tuple(separators),
        assigned_clique=tuple(assigned),
    )


def running_intersection_holds(jt: JunctionTree) -> bool:
    """Structural check: for every variable, its cliques form a subtree."""
    n_c = len(jt.cliques)
    nbrs = [[] for _ in range(n_c)]
    for i, j in jt.edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    for v in range(jt.net.n_nodes):
        holders = [i for i, c in enumerate(jt.cliques) if v in c]
        if not holders:
            return False
        seen = {holders[0]}
        stack = [holders[0]]
        holder_set = set(holders)
        while stack:
            cur = stack.pop()
            for nb in nbrs[cur]:
                if nb in holder_set and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != holder_set:
            return False
    return True


# ---------------------------------------------------------------------------
# Batched propagation
# ---------------------------------------------------------------------------


@dataclass
class Calibration:
    """Calibrated potentials for one evidence batch.

    ``pots[c]`` holds P(clique c | evidence) per subject; ``logz`` the log
    evidence probability; ``ok`` flags subjects whose evidence had nonzero
    probability.
    """

    pots: list
    seps: list
    logz: np.ndarray
    ok: np.ndarray


def _safe_divide(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


class TreeEngine:
    """Reusable propagation workspace over one compiled junction tree.

    The engine is built once per structure, re-parameterized cheaply via
    :meth:`set_tables` (EM does this every iteration), and queried with a
    batch of evidence rows. Concurrent use requires one engine per thread;
    propagation allocates fresh workspaces, so a shared engine is safe for
    read-only reuse after ``set_tables``.
    """

    def __init__(self, jt: JunctionTree):
        self.jt = jt
        net = jt.net
        self.clique_vars = [list(c) for c in jt.cliques]
        self.clique_shapes = [tuple(int(net.cards[v]) for v in c) for c in jt.cliques]

        # Rooted message schedule (root = clique 0).
        n_c = len(jt.cliques)
        nbrs = [[] for _ in range(n_c)]
        for e, (i, j) in enumerate(jt.edges):
            nbrs[i].append((j, e))
            nbrs[j].append((i, e))
        order = []
        parent = [-1] * n_c
        parent_edge = [-1] * n_c
        seen = [False] * n_c
        stack = [0]
        seen[0] = True
        while stack:
            cur = stack.pop()
            order.append(cur)
            for nb, e in nbrs[cur]:
                if not seen[nb]:
                    seen[nb] = True
                    parent[nb] = cur
                    parent_edge[nb] = e
                    stack.append(nb)
        self._collect = [
            (c, parent[c], parent_edge[c]) for c in reversed(order) if parent[c] >= 0
        ]
        self._distribute = [
            (parent[c], c, parent_edge[c]) for c in order if parent[c] >= 0
        ]
        self._root = 0
        self.base: list[np.ndarray] | None = None

    # -- geometry helpers ---------------------------------------------------

    def _axes_in(self, clique: int, vars_subset: list[int]) -> tuple[int, ...]:
        cv = self.clique_vars[clique]
        return tuple(cv.index(v) for v in vars_subset)

    def _sum_to(self, pot: np.ndarray, clique: int, keep_vars: list[int]) -> np.ndarray:
        cv = self.clique_vars[clique]
        drop = tuple(i + 1 for i, v in enumerate(cv) if v not in keep_vars)
        return pot.sum(axis=drop) if drop else pot

    def _broadcast_shape(self, clique: int, vars_subset: list[int]) -> tuple[int, ...]:
        net = self.jt.net
        return tuple(
            int(net.cards[v]) if v in vars_subset else 1 for v in self.clique_vars[clique]
        )

    # -- parameterization ----------------------------------------------------

    def set_tables(self, tables: list[np.ndarray]) -> None:
        """Fold one CPT per unrolled node into its assigned clique."""
        net = self.jt.net
        base = [np.ones(shape, dtype=float) for shape in self.clique_shapes]
        for v in range(net.n_nodes):
            family = [*net.parents[v], v]
            perm = sorted(range(len(family)), key=lambda i: family[i])
            table = np.transpose(np.asarray(tables[v], dtype=float), perm)
            clique = self.jt.assigned_clique[v]
            shape = self._broadcast_shape(clique, sorted(family))
            base[clique] = base[clique] * table.reshape(shape)
        self.base = base

    # -- propagation ----------------------------------------------------------

    def _init_pots(self, evidence: np.ndarray) -> list[np.ndarray]:
        if self.base is None:
            raise RuntimeError("set_tables must be called before propagation")
        net = self.jt.net
        n_batch = evidence.shape[0]
        pots = [
            np.broadcast_to(b, (n_batch, *b.shape)).copy() for b in self.base
        ]
        eye = {}
        for v in range(net.n_nodes):
            col = evidence[:, v]
            mask = col >= 0
            if not mask.any():
                continue
            r = int(net.cards[v])
            if r not in eye:
                eye[r] = np.eye(r)
            like = np.ones((n_batch, r))
            like[mask] = eye[r][col[mask]]
            clique = self.jt.assigned_clique[v]
            shape = (n_batch, *self._broadcast_shape(clique, [v]))
            pots[clique] *= like.reshape(shape)
        return pots

    def _collect_pass(self, pots, seps, logz, ok):
        for child, parent, e in self._collect:
            sep_vars = list(self.jt.separators[e])
            marg = self._sum_to(pots[child], child, sep_vars)
            flat = marg.reshape(marg.shape[0], -1)
            sigma = flat.sum(axis=1)
            ok &= sigma > 0
            with np.errstate(divide="ignore"):
                logz += np.where(sigma > 0, np.log(np.maximum(sigma, 1e-300)), -np.inf)
            marg = _safe_divide(marg, sigma.reshape((-1,) + (1,) * (marg.ndim - 1)))
            message = marg if seps[e] is None else _safe_divide(marg, seps[e])
            shape = (marg.shape[0], *self._broadcast_shape(parent, sep_vars))
            pots[parent] = pots[parent] * message.reshape(shape)
            seps[e] = marg
        root_flat = pots[self._root].reshape(pots[self._root].shape[0], -1)
        z = root_flat.sum(axis=1)
        ok &= z > 0
        with np.errstate(divide="ignore"):
            logz += np.where(z > 0, np.log(np.maximum(z, 1e-300)), -np.inf)
        return z

    def _distribute_pass(self, pots, seps):
        for parent, child, e in self._distribute:
            sep_vars = list(self.jt.separators[e])
            marg = self._sum_to(pots[parent], parent, sep_vars)
            message = _safe_divide(marg, seps[e])
            shape = (marg.shape[0], *self._broadcast_shape(child, sep_vars))
            pots[child] = pots[child] * message.reshape(shape)
            seps[e] = marg

    def _normalize(self, pots, seps):
        for i, pot in enumerate(pots):
            total = pot.reshape(pot.shape[0], -1).sum(axis=1)
            pots[i] = _safe_divide(pot, total.reshape((-1,) + (1,) * (pot.ndim - 1)))
        for e, sep in enumerate(seps):
            if sep is None:
                continue
            total = sep.reshape(sep.shape[0], -1).sum(axis=1)
            seps[e] = _safe_divide(sep, total.reshape((-1,) + (1,) * (sep.ndim - 1)))

    def propagate(self, evidence: np.ndarray) -> Calibration:
        """Two-pass calibration for a batch of evidence rows (-1 = unobserved)."""
        n_batch = evidence.shape[0]
        pots = self._init_pots(evidence)
        seps: list = [None] * len(self.jt.edges)
        logz = np.zeros(n_batch)
        ok = np.ones(n_batch, dtype=bool)
        self._collect_pass(pots, seps, logz, ok)
        self._distribute_pass(pots, seps)
        self._normalize(pots, seps)
        logz[~ok] = -np.inf
        return Calibration(pots=pots, seps=seps, logz=logz, ok=ok)

    def recalibrate(self, calib: Calibration) -> float:
        """Run a second collect/distribute on calibrated state; returns max |delta|."""
        pots = [p.copy() for p in calib.pots]
        seps = [None if s is None else s.copy() for s in calib.seps]
        logz = np.zeros(pots[0].shape[0])
        ok = np.ones(pots[0].shape[0], dtype=bool)
        self._collect_pass(pots, seps, logz, ok)
        self._distribute_pass(pots, seps)
        self._normalize(pots, seps)
        delta = 0.0
        for old, new in zip(calib.pots, pots):
            delta = max(delta, float(np.abs(old - new).max()))
        return delta

    def loglik(self, evidence: np.ndarray) -> np.ndarray:
        """Collect-only pass returning log evidence probability per row."""
        pots = self._init_pots(evidence)
        seps: list = [None] * len(self.jt.edges)
        logz = np.zeros(evidence.shape[0])
        ok = np.ones(evidence.shape[0], dtype=bool)
        self._collect_pass(pots, seps, logz, ok)
        logz[~ok] = -np.inf
        return logz

    # -- queries ---------------------------------------------------------------

    def node_marginal(self, calib: Calibration, v: int) -> np.ndarray:
        clique = self.jt.assigned_clique[v]
        return self._sum_to(calib.pots[clique], clique, [v])

    def node_marginal_from(self, calib: Calibration, clique: int, v: int) -> np.ndarray:
        return self._sum_to(calib.pots[clique], clique, [v])

    def family_marginal(self, calib: Calibration, v: int) -> np.ndarray:
        """Joint of (parents..., v) in CPT axis order, normalized per subject."""
        net = self.jt.net
        family = [*net.parents[v], v]
        order = sorted(range(len(family)), key=lambda i: family[i])
        clique = self.jt.assigned_clique[v]
        marg = self._sum_to(calib.pots[clique], clique, sorted(family))
        inverse = np.argsort(order)
        return np.transpose(marg, (0, *(1 + inverse)))

    def partition(self, calib: Calibration) -> np.ndarray:
        return np.exp(calib.logz)


def query_marginals(jt: JunctionTree, tables: list[np.ndarray], evidence: Evidence):
    """Calibrate once and return ({(var, t): probability vector}, evidence probability)."""
    engine = TreeEngine(jt)
    engine.set_tables(tables)
    calib = engine.propagate(evidence.as_matrix(jt.net))
    if not calib.ok[0]:
        raise InconsistentEvidence("evidence has probability zero")
    marginals = {
        name: engine.node_marginal(calib, v)[0].copy()
        for v, name in enumerate(jt.net.names)
    }
    return marginals, float(engine.partition(calib)[0])


# ---------------------------------------------------------------------------
# Compiled model and prediction
# ---------------------------------------------------------------------------


@dataclass
class CompiledDbn:
    """Structure + parameters unrolled to a horizon and ready to query."""

    structure: object
    horizon: int
    net: UnrolledNet = field(init=False)
    engine: TreeEngine = field(init=False)

    def __post_init__(self):
        self.net = unroll(self.structure, self.horizon)
        self.engine = TreeEngine(compile_junction_tree(self.net))

    def set_cpts(self, cpts) -> None:
        self.engine.set_tables(unrolled_tables(self.structure, cpts, self.horizon))

    def target_index(self, t: int) -> int:
        return self.net.index(self.structure.target, t)

    def predict_batch(
        self, evidence: np.ndarray, t_obs: int, lookahead: int
    ) -> np.ndarray:
        """P(target = event at t_obs + lookahead) per evidence row.

        Evidence columns beyond t_obs must already be -1; rows with zero
        evidence probability raise InconsistentEvidence.
        """
        t_query = t_obs + lookahead
        if t_query > self.horizon - 1:
            raise HorizonExceeded(
                f"t={t_obs} + lookahead {lookahead} exceeds horizon {self.horizon}"
            )
        calib = self.engine.propagate(evidence)
        if not calib.ok.all():
            bad = int(np.flatnonzero(~calib.ok)[0])
            raise InconsistentEvidence(f"evidence row {bad} has probability zero")
        marg = self.engine.node_marginal(calib, self.target_index(t_query))
        return marg[:, 1].copy()


def predict_event(model: CompiledDbn, evidence: Evidence, lookahead: int) -> float:
    """Single-subject convenience wrapper around :meth:`CompiledDbn.predict_batch`."""
    row = evidence.as_matrix(model.net)
    return float(model.predict_batch(row, evidence.t_obs, lookahead)[0])


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


def brute_force_joint(
    net: UnrolledNet,
    tables: list[np.ndarray],
    evidence: Evidence | np.ndarray,
    query: int,
) -> np.ndarray:
    """Full-enumeration conditional marginal of ``query`` (test oracle).

    Builds the joint by broadcasting every CPT over the full state space,
    zeroes out states conflicting with evidence, and normalizes.
    """
    cards = [int(c) for c in net.cards]
    total_states = 1
    for c in cards:
        total_states *= c
        if total_states > ORACLE_STATE_CAP:
            raise OracleTooLarge(f"{total_states} joint states exceed the oracle cap")

    joint = np.ones(tuple(cards), dtype=float)
    m = net.n_nodes
    for v in range(m):
        family = [*net.parents[v], v]
        shape = [1] * m
        for u in family:
            shape[u] = cards[u]
        table = np.asarray(tables[v], dtype=float)
        perm = sorted(range(len(family)), key=lambda i: family[i])
        expanded = np.transpose(table, perm).reshape(shape)
        joint = joint * expanded

    if isinstance(evidence, Evidence):
        row = evidence.as_matrix(net)[0]
    else:
        row = np.asarray(evidence).ravel()
    for v in range(m):
        if row[v] >= 0:
            index = [slice(None)] * m
            keep = np.zeros(cards[v])
            keep[int(row[v])] = 1.0
            shape = [1] * m
            shape[v] = cards[v]
            joint = joint * keep.reshape(shape)

    axes = tuple(i for i in range(m) if i != query)
    vector = joint.sum(axis=axes)
    total = vector.sum()
    if total <= 0:
        raise InconsistentEvidence("evidence has probability zero")
    return vector / total
