import json

import pytest
from hypothesis import given, settings, strategies as st

from tracenet.graph import (
    Act,
    And,
    Loop,
    Node,
    Or,
    ProcessGraph,
    ProcessText,
    SchemaError,
    Seq,
    Unstructured,
    ValidationError,
    Xor,
    back_edges,
    check_score,
    decompose,
    flatten,
    graph_from_json,
    graph_to_json,
    parse_graph,
    same_tree,
    serialize_graph,
    topological_order,
    tree_from_json,
    tree_to_json,
    validate_tree,
)

from _trees import random_tree


def _doc(nodes, edges, entry, exit_, gid="g"):
    return json.dumps({"id": gid, "nodes": nodes, "edges": edges, "entry": entry, "exit": exit_})


def act(i):
    return {"id": i, "kind": "activity", "label": f"do {i}"}


def gw(i, kind, role):
    return {"id": i, "kind": "gateway", "gateway_kind": kind, "gateway_role": role}


XOR_DEF = _doc(
    [gw("g1", "xor", "split"), act("D"), act("E"), act("F"), gw("g2", "xor", "join")],
    [["g1", "D"], ["g1", "E"], ["g1", "F"], ["D", "g2"], ["E", "g2"], ["F", "g2"]],
    "g1",
    "g2",
)


class TestParse:
    def test_minimal_sequence(self):
        g = parse_graph(_doc([act("A"), act("B")], [["A", "B"]], "A", "B").encode())
        assert (g.entry, g.exit) == ("A", "B")
        assert g.edges == (("A", "B"),)

    def test_unknown_edge_target_names_node(self):
        with pytest.raises(ValidationError) as err:
            parse_graph(_doc([act("A"), act("B")], [["A", "B"], ["B", "Z"]], "A", "B"))
        assert err.value.subject == "Z"
        assert "Z" in str(err.value)

    def test_xor_pattern_counts(self):
        g = parse_graph(XOR_DEF)
        assert len(g.nodes) == 5
        assert len(g.edges) == 6

    def test_schema_violation(self):
        with pytest.raises(SchemaError):
            parse_graph(json.dumps({"id": "g", "nodes": []}))

    def test_not_json(self):
        with pytest.raises(SchemaError):
            parse_graph(b"{nope")

    @pytest.mark.parametrize(
        "nodes,edges,entry,exit_",
        [
            ([act("A"), act("A")], [["A", "A"]], "A", "A"),
            ([act("A"), act("B")], [["A", "B"], ["B", "A"]], "A", "B"),
            ([act("A"), act("B"), act("C")], [["A", "B"]], "A", "B"),
            ([act("A"), act("B")], [["A", "B"], ["A", "B"]], "A", "B"),
        ],
        ids=["duplicate-id", "entry-has-inedge", "unreachable", "duplicate-edge"],
    )
    def test_invalid_graphs(self, nodes, edges, entry, exit_):
        with pytest.raises(ValidationError):
            parse_graph(_doc(nodes, edges, entry, exit_))

    def test_node_field_rules(self):
        with pytest.raises(ValidationError):
            Node("a", "activity")
        with pytest.raises(ValidationError):
            Node("g", "gateway", gateway_kind="xor")
        with pytest.raises(ValidationError):
            Node("bad id", "activity", label="x")

    def test_round_trip(self):
        g = parse_graph(XOR_DEF)
        assert parse_graph(serialize_graph(g)) == g
        assert graph_from_json(graph_to_json(g)) == g


class TestFlatten:
    def test_seq(self):
        g = flatten(Seq((Act("a", "a"), Act("b", "b"))), "t")
        assert len(g.nodes) == 2 and g.edges == (("a", "b"),)

    def test_and_pattern(self):
        g = flatten(And((Act("G", "G"), Act("H", "H"), Act("I", "I"))), "t")
        kinds = sorted((n.gateway_kind, n.gateway_role) for n in g.nodes if n.is_gateway)
        assert len(g.nodes) == 5
        assert kinds == [("and", "join"), ("and", "split")]

    def test_loop_has_one_back_edge(self):
        tree = Seq((Act("a", "a1"), Loop(Act("b", "a2")), Act("c", "a3")))
        g = flatten(tree, "t")
        assert len(back_edges(g)) == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.booleans())
    def test_decompose_inverts_flatten(self, seed, loops):
        tree = random_tree(seed, loops=loops)
        assert same_tree(decompose(flatten(tree, "t")), tree)


class TestDecompose:
    def test_chain(self):
        g = parse_graph(_doc([act("a"), act("b"), act("c")], [["a", "b"], ["b", "c"]], "a", "c"))
        assert same_tree(decompose(g), Seq(tuple(Act(f"do {x}", x) for x in "abc")))

    def test_or_pattern(self):
        g = parse_graph(_doc(
            [gw("s", "or", "split"), act("J"), act("K"), gw("j", "or", "join")],
            [["s", "J"], ["s", "K"], ["J", "j"], ["K", "j"]], "s", "j"))
        assert same_tree(decompose(g), Or((Act("do J", "J"), Act("do K", "K"))))

    def test_mismatched_join_is_unstructured(self):
        g = parse_graph(_doc(
            [gw("s", "xor", "split"), act("a"), act("b"), gw("j", "and", "join")],
            [["s", "a"], ["s", "b"], ["a", "j"], ["b", "j"]], "s", "j"))
        assert isinstance(decompose(g), Unstructured)


class TestTrees:
    def test_arity(self):
        with pytest.raises(ValidationError):
            Seq((Act("a", "a1"),))
        with pytest.raises(ValidationError):
            Xor((Act("a", "a1"),))

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError):
            validate_tree(Seq((Act("a", "a1"), Act("b", "a1"))))

    def test_boundary_loop(self):
        with pytest.raises(ValidationError):
            validate_tree(Seq((Loop(Act("a", "a1")), Act("b", "a2"))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_json_round_trip(self, seed):
        tree = random_tree(seed)
        gid, back = tree_from_json(json.loads(json.dumps(tree_to_json(tree, "x"))))
        assert gid == "x" and back == tree


def test_topological_order_ignores_back_edges():
    tree = Seq((Act("a", "a1"), Loop(Act("b", "a2")), Act("c", "a3")))
    order = topological_order(flatten(tree, "t"))
    assert order[0] == "a1" and order[-1] == "a3"
    assert order.index("l1j") < order.index("l1s") < order.index("a2")


def test_process_text_and_score():
    with pytest.raises(ValidationError):
        ProcessText(())
    with pytest.raises(ValidationError):
        ProcessText(("ok", "  "))
    assert check_score(1) == 1.0
    with pytest.raises(ValueError):
        check_score(1.01)


def test_graph_is_immutable():
    g = parse_graph(XOR_DEF)
    with pytest.raises(AttributeError):
        g.entry = "D"
    assert isinstance(g, ProcessGraph)
