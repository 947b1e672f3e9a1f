import io
import math
from collections import Counter
from itertools import permutations

import pytest
from hypothesis import given, settings, strategies as st

from tracenet.forge import GenConfig, gen_graph
from tracenet.graph import Act, And, Loop, Node, Or, ProcessGraph, Seq, Xor, decompose, flatten
from tracenet.traces import (
    CapTooSmall,
    DeadlockError,
    Projection,
    TraceCaps,
    UnknownToken,
    count_traces,
    enumerate_traces,
    project_trace,
    random_walks,
    read_corpus,
    sample_traces,
    structural_walks,
    token_game_runs,
    write_corpus,
)

from _trees import random_tree


def acts(*names):
    return tuple(Act(n, n) for n in names)


class TestEnumerate:
    def test_sequence(self):
        assert enumerate_traces(Seq(acts("A", "B", "C"))).as_set() == {("A", "B", "C")}

    def test_and_interleavings(self):
        traces = enumerate_traces(And(acts("G", "H", "I"))).as_set()
        assert len(traces) == 6
        assert ("g1s", "G", "H", "I", "g1j") in traces
        assert {t[1:-1] for t in traces} == set(permutations("GHI"))

    def test_or_subsets(self):
        traces = enumerate_traces(Or(acts("J", "K"))).as_set()
        assert traces == {("g1s", "J", "g1j"), ("g1s", "K", "g1j"), ("g1s", "J", "K", "g1j"), ("g1s", "K", "J", "g1j")}

    def test_xor_product(self):
        tree = Seq((Xor(acts("a", "b")), Xor(acts("c", "d"))))
        assert len(enumerate_traces(tree)) == 4

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_and_factorial(self, k):
        assert count_traces(And(acts(*"abcde"[:k]))) == math.factorial(k)

    def test_cap_too_small(self):
        with pytest.raises(CapTooSmall):
            TraceCaps(max_traces=0)

    def test_capped_sample_is_uniform_subset(self):
        tree = And(acts(*"abcdef"))
        full = enumerate_traces(tree).as_set()
        capped = enumerate_traces(tree, TraceCaps(max_traces=50, seed=3))
        assert capped.truncated and len(capped) == 50
        assert capped.as_set() <= full

    def test_capped_enumeration_is_seeded(self):
        tree = And(acts(*"abcdef"))
        a = enumerate_traces(tree, TraceCaps(max_traces=20, seed=1))
        b = enumerate_traces(tree, TraceCaps(max_traces=20, seed=1))
        assert a == b

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_token_game(self, seed):
        tree = random_tree(seed, max_acts=7)
        assert enumerate_traces(tree).as_set() == token_game_runs(flatten(tree, "t"))

    @pytest.mark.parametrize(
        "tree",
        [
            Seq((Act("x", "x"), Loop(Or(acts("b", "c"))), Act("y", "y"))),
            Seq((Act("x", "x"), Loop(Or((Seq(acts("b", "c")), Act("d", "d")))), Act("y", "y"))),
            Seq((Act("x", "x"), Or((And((Loop(Act("a", "a")), Act("b", "b"))), Act("c", "c"))), Act("y", "y"))),
        ],
        ids=["or-in-loop", "seq-or-in-loop", "loop-in-and-in-or"],
    )
    def test_or_join_with_loops(self, tree):
        assert enumerate_traces(tree).as_set() == token_game_runs(flatten(tree, "t"))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_count_matches_enumeration(self, seed):
        tree = random_tree(seed, max_acts=7)
        assert count_traces(tree) == len(enumerate_traces(tree))


def _chain():
    return ProcessGraph("c", (Node("a", "activity", "a"), Node("b", "activity", "b")), (("a", "b"),), "a", "b")


class TestSample:
    def test_chain(self):
        ts = sample_traces(_chain(), TraceCaps(max_traces=5, seed=9))
        assert ts.as_set() == {("a", "b")}

    def test_xor_coverage(self):
        g = flatten(Xor(acts("D", "E", "F")), "x")
        sampled = sample_traces(g, TraceCaps(max_traces=300, seed=0)).as_set()
        assert sampled == enumerate_traces(decompose(g)).as_set()

    def test_sample_subset_of_enumeration(self):
        tree = random_tree(11, loops=False)
        g = flatten(tree, "t")
        assert sample_traces(g, TraceCaps(max_traces=30, seed=2)).as_set() <= enumerate_traces(tree).as_set()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_generated_graphs_never_deadlock(self, seed):
        g = flatten(gen_graph(GenConfig(seed=seed)), "t")
        ts = sample_traces(g, TraceCaps(max_traces=30, seed=seed))
        assert all(t[0] == g.entry and t[-1] == g.exit for t in ts)

    def test_and_split_xor_join_fails(self):
        nodes = (
            Node("s", "gateway", gateway_kind="and", gateway_role="split"),
            Node("a", "activity", "a"),
            Node("b", "activity", "b"),
            Node("j", "gateway", gateway_kind="xor", gateway_role="join"),
        )
        g = ProcessGraph("m", nodes, (("s", "a"), ("s", "b"), ("a", "j"), ("b", "j")), "s", "j")
        with pytest.raises(DeadlockError):
            sample_traces(g, TraceCaps(max_traces=5))


class TestWalks:
    def test_two_node_alternation(self):
        walks = random_walks({"a": ["b"], "b": ["a"]}, 1, 3, 0)
        assert sorted(walks) == [("a", "b", "a"), ("b", "a", "b")]

    def test_walk_count(self):
        adj = {str(i): [str((i + 1) % 5), str((i - 1) % 5)] for i in range(5)}
        assert len(random_walks(adj, 10, 4, 0)) == 50

    def test_star_hub_every_other_step(self):
        leaves = [f"l{i}" for i in range(6)]
        adj = {"hub": leaves, **{l: ["hub"] for l in leaves}}
        walks = random_walks(adj, 200, 9, 1)
        odd = Counter(w[i] == "hub" for w in walks for i in range(1, 9, 2) if w[0] != "hub")
        assert odd[False] == 0
        # walks from leaves hit the hub on every odd step, walks from the hub on every even step
        share = sum(tok == "hub" for w in walks for tok in w) / sum(len(w) for w in walks)
        expected = (1 * 5 + 6 * 4) / (7 * 9)
        assert abs(share - expected) < 0.02

    def test_structural_walks_ignore_direction(self):
        ts = structural_walks(_chain(), 2, 3, 0)
        assert len(ts) == 4
        assert ("b", "a", "b") in ts.as_set()


class TestProjection:
    def setup_method(self):
        self.g = flatten(Seq((Act("x", "x0"), Xor(acts("D", "E")), Act("y", "y0"))), "p")
        self.trace = ("x0", "g1s", "D", "g1j", "y0")

    def test_activities(self):
        assert project_trace(self.trace, self.g, Projection.ACTIVITIES) == ("x0", "D", "y0")

    def test_gateways(self):
        assert project_trace(self.trace, self.g, "gateways") == ("g1s", "g1j")

    def test_all(self):
        assert project_trace(self.trace, self.g, "all") == self.trace

    def test_unknown_token(self):
        with pytest.raises(UnknownToken):
            project_trace(("zz",), self.g, "all")


def test_corpus_round_trip():
    buf = io.StringIO()
    n = write_corpus([("g1", ("a", "b")), ("g2", ("c",))], buf)
    assert n == 2
    text = buf.getvalue()
    assert text.splitlines()[0] == "#tracewalk-corpus v1"
    assert read_corpus(io.StringIO(text)) == [["g1.a", "g1.b"], ["g2.c"]]
