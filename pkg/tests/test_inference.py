import numpy as np
import pytest

from raus import inference as inf
from raus.errors import (
    HorizonExceeded,
    InconsistentEvidence,
    OracleTooLarge,
    TreewidthTooLarge,
)
from raus.params import Cpt, CptSet
from raus.structure import IntraDag, InterEdges, assemble_2tbn

from conftest import random_2tbn


def single_slice_net(structure, cpts):
    net = inf.unroll(structure, 1)
    tables = inf.unrolled_tables(structure, cpts, 1)
    return net, tables


class TestCompile:
    def test_chain_cliques(self, chain_structure):
        net = inf.unroll(chain_structure, 1)
        jt = inf.compile_junction_tree(net)
        cliques = {frozenset(c) for c in jt.cliques}
        assert cliques == {frozenset({0, 1}), frozenset({1, 2})}
        assert jt.separators == ((1,),)

    def test_diamond_running_intersection(self):
        intra = IntraDag(
            ("a", "b", "c", "d"),
            {"b": ("a",), "c": ("a",), "d": ("b", "c")},
        )
        st = assemble_2tbn(intra, InterEdges(()), "d", {v: 2 for v in "abcd"})
        jt = inf.compile_junction_tree(inf.unroll(st, 1))
        assert inf.running_intersection_holds(jt)
        # the moral edge b-c must land b, c, d in one clique
        assert any({1, 2, 3} <= set(c) for c in jt.cliques)

    def test_empty_edge_net(self):
        intra = IntraDag(("a", "b", "c"), {})
        st = assemble_2tbn(intra, InterEdges(()), "c", {v: 2 for v in "abc"})
        jt = inf.compile_junction_tree(inf.unroll(st, 1))
        assert len(jt.cliques) == 3
        assert all(len(c) == 1 for c in jt.cliques)
        assert len(jt.edges) == 2  # still one connected tree

    def test_treewidth_cap(self, chain_structure):
        net = inf.unroll(chain_structure, 3)
        with pytest.raises(TreewidthTooLarge):
            inf.compile_junction_tree(net, state_cap=1)

    def test_rip_on_random_nets(self):
        for seed in range(20):
            st, _ = random_2tbn(3, seed)
            jt = inf.compile_junction_tree(inf.unroll(st, 3))
            assert inf.running_intersection_holds(jt)


class TestQueryMarginals:
    def test_chain_no_evidence(self, chain_structure, chain_cpts):
        net, tables = single_slice_net(chain_structure, chain_cpts)
        jt = inf.compile_junction_tree(net)
        marg, z = inf.query_marginals(jt, tables, inf.Evidence({}, 0))
        assert marg[("c", 0)][1] == pytest.approx(0.404, abs=1e-9)
        assert z == pytest.approx(1.0, abs=1e-12)

    def test_chain_posterior(self, chain_structure, chain_cpts):
        net, tables = single_slice_net(chain_structure, chain_cpts)
        jt = inf.compile_junction_tree(net)
        marg, z = inf.query_marginals(jt, tables, inf.Evidence({("c", 0): 1}, 0))
        assert marg[("a", 0)][1] == pytest.approx(0.222 / 0.404, abs=1e-9)
        assert round(marg[("a", 0)][1], 4) == 0.5495
        assert z == pytest.approx(0.404, abs=1e-12)

    def test_full_evidence_point_masses(self, chain_structure, chain_cpts):
        net, tables = single_slice_net(chain_structure, chain_cpts)
        jt = inf.compile_junction_tree(net)
        ev = inf.Evidence({("a", 0): 1, ("b", 0): 0, ("c", 0): 1}, 0)
        marg, z = inf.query_marginals(jt, tables, ev)
        for vec in marg.values():
            assert set(np.round(vec, 12)) <= {0.0, 1.0}
        assert z == pytest.approx(0.3 * 0.2 * 0.1, abs=1e-12)

    def test_inconsistent_evidence(self):
        intra = IntraDag(("a", "b"), {"b": ("a",)})
        st = assemble_2tbn(intra, InterEdges(()), "b", {"a": 2, "b": 2})
        cpts = CptSet(
            priors={
                "a": Cpt("a", (), np.array([1.0, 0.0])),
                "b": Cpt("b", (("a", 0),), np.array([[1.0, 0.0], [0.0, 1.0]])),
            },
            transitions={},
            pseudocount=0.0,
        )
        net = inf.unroll(st, 1)
        tables = [cpts.priors["a"].table, cpts.priors["b"].table]
        jt = inf.compile_junction_tree(net)
        with pytest.raises(InconsistentEvidence):
            inf.query_marginals(jt, tables, inf.Evidence({("b", 0): 1}, 0))


class TestCalibrationProperties:
    def _calibrated(self, seed, horizon=3):
        st, cpts = random_2tbn(3, seed)
        net = inf.unroll(st, horizon)
        engine = inf.TreeEngine(inf.compile_junction_tree(net))
        engine.set_tables(inf.unrolled_tables(st, cpts, horizon))
        rng = np.random.default_rng(seed + 999)
        ev = np.full((4, net.n_nodes), -1, dtype=np.int16)
        for row in range(4):
            for j in range(net.n_nodes):
                if rng.random() < 0.25:
                    ev[row, j] = rng.integers(0, net.cards[j])
        return net, engine, engine.propagate(ev)

    def test_idempotent_recalibration(self):
        for seed in range(10):
            _, engine, calib = self._calibrated(seed)
            assert engine.recalibrate(calib) <= 1e-12

    def test_clique_marginals_agree(self):
        for seed in range(10):
            net, engine, calib = self._calibrated(seed)
            for v in range(net.n_nodes):
                holders = [i for i, c in enumerate(engine.jt.cliques) if v in c]
                reference = engine.node_marginal_from(calib, holders[0], v)
                for h in holders[1:]:
                    other = engine.node_marginal_from(calib, h, v)
                    assert np.abs(reference - other).max() <= 1e-9


class TestOracleAgreement:
    def test_random_nets_match_brute_force(self):
        max_delta = 0.0
        for seed in range(30):
            st, cpts = random_2tbn(3, seed)
            horizon = 3
            net = inf.unroll(st, horizon)
            tables = inf.unrolled_tables(st, cpts, horizon)
            jt = inf.compile_junction_tree(net)
            rng = np.random.default_rng(seed)
            items = {}
            for j, name in enumerate(net.names):
                if rng.random() < 0.3:
                    items[name] = int(rng.integers(0, net.cards[j]))
            ev = inf.Evidence(items, horizon - 1)
            marg, _ = inf.query_marginals(jt, tables, ev)
            for j, name in enumerate(net.names):
                oracle = inf.brute_force_joint(net, tables, ev, j)
                max_delta = max(max_delta, float(np.abs(oracle - marg[name]).max()))
        assert max_delta <= 1e-9

    def test_single_node_prior(self):
        intra = IntraDag(("a",), {})
        st = assemble_2tbn(intra, InterEdges(()), "a", {"a": 3})
        cpts = CptSet(
            priors={"a": Cpt("a", (), np.array([0.2, 0.5, 0.3]))},
            transitions={}, pseudocount=0.0,
        )
        net = inf.unroll(st, 1)
        vec = inf.brute_force_joint(net, [cpts.priors["a"].table], inf.Evidence({}, 0), 0)
        assert np.allclose(vec, [0.2, 0.5, 0.3], atol=1e-12)

    def test_all_evidence_point_mass(self, chain_structure, chain_cpts):
        net, tables = single_slice_net(chain_structure, chain_cpts)
        ev = inf.Evidence({("a", 0): 0, ("b", 0): 1, ("c", 0): 1}, 0)
        vec = inf.brute_force_joint(net, tables, ev, 1)
        assert vec.tolist() == [0.0, 1.0]

    def test_oracle_cap(self):
        st, cpts = random_2tbn(6, 0, max_card=3)
        horizon = 4
        net = inf.unroll(st, horizon)
        tables = inf.unrolled_tables(st, cpts, horizon)
        with pytest.raises(OracleTooLarge):
            inf.brute_force_joint(net, tables, inf.Evidence({}, 0), 0)


class TestPredictEvent:
    def _model(self, chain_structure, chain_cpts, horizon=4):
        model = inf.CompiledDbn(chain_structure, horizon)
        model.set_cpts(chain_cpts)
        return model

    def test_horizon_exceeded(self, chain_structure, chain_cpts):
        model = self._model(chain_structure, chain_cpts)
        with pytest.raises(HorizonExceeded):
            inf.predict_event(model, inf.Evidence({}, 3), 1)

    def test_no_evidence_gives_prior(self, chain_structure, chain_cpts):
        model = self._model(chain_structure, chain_cpts)
        p = inf.predict_event(model, inf.Evidence({}, 0), 1)
        net = model.net
        tables = inf.unrolled_tables(chain_structure, chain_cpts, 4)
        oracle = inf.brute_force_joint(net, tables, inf.Evidence({}, 0), net.index("c", 1))
        assert p == pytest.approx(float(oracle[1]), abs=1e-9)

    def test_deterministic_copy_indicator(self):
        # target copies the lab within-slice; evidence pins the prediction
        intra = IntraDag(("lab", "y"), {"y": ("lab",)})
        st = assemble_2tbn(intra, InterEdges(()), "y", {"lab": 2, "y": 2})
        copy_table = np.array([[1.0, 0.0], [0.0, 1.0]])
        cpt_lab = Cpt("lab", (), np.array([0.5, 0.5]))
        cpts = CptSet(
            priors={"lab": cpt_lab, "y": Cpt("y", (("lab", 0),), copy_table)},
            transitions={"lab": cpt_lab, "y": Cpt("y", (("lab", 0),), copy_table)},
            pseudocount=0.0,
        )
        model = inf.CompiledDbn(st, 2)
        model.set_cpts(cpts)
        # horizon 2, predict y at t=1 from lab at t=1? evidence is cut at t_obs;
        # here the lab at t=0 pins y at t=0 but not t=1 (independent slices), so
        # use lookahead 0 at t_obs=1 via batch: lab@1=1 -> P(y@1)=1
        ev = np.full((2, model.net.n_nodes), -1, dtype=np.int16)
        ev[0, model.net.index("lab", 1)] = 1
        ev[1, model.net.index("lab", 1)] = 0
        p = model.predict_batch(ev, 1, 0)
        assert p.tolist() == [1.0, 0.0]

    def test_implied_evidence_is_a_no_op(self, chain_structure):
        # b deterministically copies a; adding the implied b as evidence must
        # not move the target's posterior
        cpts = CptSet(
            priors={
                "a": Cpt("a", (), np.array([0.4, 0.6])),
                "b": Cpt("b", (("a", 0),), np.array([[1.0, 0.0], [0.0, 1.0]])),
                "c": Cpt("c", (("b", 0),), np.array([[0.9, 0.1], [0.2, 0.8]])),
            },
            transitions={
                "a": Cpt("a", (("a", 1),), np.array([[0.7, 0.3], [0.3, 0.7]])),
                "b": Cpt("b", (("a", 0),), np.array([[1.0, 0.0], [0.0, 1.0]])),
                "c": Cpt("c", (("b", 0),), np.array([[0.9, 0.1], [0.2, 0.8]])),
            },
            pseudocount=0.0,
        )
        from raus.structure import InterEdge

        intra = IntraDag(("a", "b", "c"), {"b": ("a",), "c": ("b",)})
        st = assemble_2tbn(
            intra, InterEdges((InterEdge("a", "a", 1.0),)), "c", {v: 2 for v in "abc"}
        )
        model = inf.CompiledDbn(st, 3)
        model.set_cpts(cpts)
        base = inf.predict_event(model, inf.Evidence({("a", 0): 1}, 0), 2)
        extended = inf.predict_event(
            model, inf.Evidence({("a", 0): 1, ("b", 0): 1}, 0), 2
        )
        assert abs(base - extended) <= 1e-12
