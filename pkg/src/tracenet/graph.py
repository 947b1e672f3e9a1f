"""Process graphs in two forms: flat node/edge graphs and block trees.

A flat :class:`ProcessGraph` is what tools exchange. A block tree (``Act``,
``Seq``, ``Xor``, ``And``, ``Or``, ``Loop``) is what generation and trace
enumeration work on. :func:`flatten` and :func:`decompose` convert between them.
"""

from __future__ import annotations

import heapq
import json
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Iterator, Union

import jsonschema

ACTIVITY = "activity"
GATEWAY = "gateway"
GATEWAY_KINDS = ("xor", "and", "or")
GATEWAY_ROLES = ("split", "join")

_ID_RE = re.compile(r"^[A-Za-z0-9_]+$")
# ids reserved for gateways emitted by flatten()
_GATEWAY_ID_RE = re.compile(r"^[gl]\d+[sj]$")


class GraphError(ValueError):
    pass


class SchemaError(GraphError):
    """Malformed JSON or missing/mistyped fields."""


class ValidationError(GraphError):
    """Structurally invalid graph or tree. ``subject`` names the offender."""

    def __init__(self, message: str, subject: str | None = None):
        super().__init__(message)
        self.subject = subject


def _load_schema(name: str) -> dict:
    return json.loads(resources.files("tracenet.schemas").joinpath(name).read_text())


# --------------------------------------------------------------------------- flat graphs


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    label: str | None = None
    gateway_kind: str | None = None
    gateway_role: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not _ID_RE.match(self.id):
            raise ValidationError(f"invalid node id {self.id!r}", self.id)
        if self.kind == ACTIVITY:
            if not self.label or not self.label.strip():
                raise ValidationError(f"activity {self.id} has no label", self.id)
            if self.gateway_kind is not None or self.gateway_role is not None:
                raise ValidationError(f"activity {self.id} carries gateway fields", self.id)
        elif self.kind == GATEWAY:
            if self.label is not None:
                raise ValidationError(f"gateway {self.id} carries a label", self.id)
            if self.gateway_kind not in GATEWAY_KINDS or self.gateway_role not in GATEWAY_ROLES:
                raise ValidationError(f"gateway {self.id} needs gateway_kind and gateway_role", self.id)
        else:
            raise ValidationError(f"node {self.id} has unknown kind {self.kind!r}", self.id)

    @property
    def is_activity(self) -> bool:
        return self.kind == ACTIVITY

    @property
    def is_gateway(self) -> bool:
        return self.kind == GATEWAY


@dataclass(frozen=True)
class ProcessGraph:
    """A validated labeled process graph. Construction raises ValidationError."""

    id: str
    nodes: tuple[Node, ...]
    edges: tuple[tuple[str, str], ...]
    entry: str
    exit: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((a, b) for a, b in self.edges))
        self._validate()

    def _validate(self) -> None:
        ids = [n.id for n in self.nodes]
        seen = set()
        for nid in ids:
            if nid in seen:
                raise ValidationError(f"duplicate node id {nid}", nid)
            seen.add(nid)
        if not self.nodes:
            raise ValidationError("graph has no nodes")
        edge_set = set()
        for a, b in self.edges:
            for end in (a, b):
                if end not in seen:
                    raise ValidationError(f"edge ({a}, {b}) references unknown node {end}", end)
            if (a, b) in edge_set:
                raise ValidationError(f"duplicate edge ({a}, {b})", f"{a}->{b}")
            edge_set.add((a, b))
        for end, name in ((self.entry, "entry"), (self.exit, "exit")):
            if end not in seen:
                raise ValidationError(f"{name} {end} is not a node", end)
        if self.predecessors[self.entry]:
            raise ValidationError(f"entry {self.entry} has incoming edges", self.entry)
        if self.successors[self.exit]:
            raise ValidationError(f"exit {self.exit} has outgoing edges", self.exit)
        for nid in ids:
            if nid != self.entry and not self.predecessors[nid]:
                raise ValidationError(f"node {nid} is a second entry", nid)
            if nid != self.exit and not self.successors[nid]:
                raise ValidationError(f"node {nid} is a second exit", nid)
        fwd = _reach(self.entry, self.successors)
        bwd = _reach(self.exit, self.predecessors)
        for nid in ids:
            if nid not in fwd:
                raise ValidationError(f"node {nid} is unreachable from entry", nid)
            if nid not in bwd:
                raise ValidationError(f"exit is unreachable from node {nid}", nid)

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            out[a].append(b)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def predecessors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            out[b].append(a)
        return {k: tuple(v) for k, v in out.items()}

    def __getitem__(self, node_id: str) -> Node:
        return self.node_map[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def activities(self) -> list[Node]:
        return [n for n in self.nodes if n.is_activity]


def _reach(start: str, adj: dict[str, tuple[str, ...]]) -> set[str]:
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def back_edges(graph: ProcessGraph) -> set[tuple[str, str]]:
    """Edges closing a cycle in a depth-first search from the entry."""
    result = set()
    state = {graph.entry: 1}
    stack = [(graph.entry, iter(graph.successors[graph.entry]))]
    while stack:
        u, it = stack[-1]
        for v in it:
            s = state.get(v, 0)
            if s == 1:
                result.add((u, v))
            elif s == 0:
                state[v] = 1
                stack.append((v, iter(graph.successors[v])))
                break
        else:
            state[u] = 2
            stack.pop()
    return result


def topological_order(graph: ProcessGraph) -> list[str]:
    """Kahn order over the graph minus back edges; ties broken by node id."""
    skip = back_edges(graph)
    indeg = {n.id: 0 for n in graph.nodes}
    for a, b in graph.edges:
        if (a, b) not in skip:
            indeg[b] += 1
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in graph.successors[u]:
            if (u, v) in skip:
                continue
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    return order


def graph_to_json(graph: ProcessGraph) -> dict:
    nodes = []
    for n in graph.nodes:
        d = {"id": n.id, "kind": n.kind}
        if n.is_activity:
            d["label"] = n.label
        else:
            d["gateway_kind"] = n.gateway_kind
            d["gateway_role"] = n.gateway_role
        nodes.append(d)
    return {
        "id": graph.id,
        "entry": graph.entry,
        "exit": graph.exit,
        "nodes": nodes,
        "edges": [[a, b] for a, b in graph.edges],
    }


def graph_from_json(doc) -> ProcessGraph:
    try:
        jsonschema.validate(doc, _load_schema("graph.schema.json"))
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"flat graph: {exc.message}") from None
    nodes = [
        Node(
            id=n["id"],
            kind=n["kind"],
            label=n.get("label"),
            gateway_kind=n.get("gateway_kind"),
            gateway_role=n.get("gateway_role"),
        )
        for n in doc["nodes"]
    ]
    return ProcessGraph(doc["id"], tuple(nodes), tuple(map(tuple, doc["edges"])), doc["entry"], doc["exit"])


def parse_graph(data: bytes | str) -> ProcessGraph:
    """Parse a UTF-8 flat-graph JSON document into a validated graph."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return graph_from_json(doc)


def serialize_graph(graph: ProcessGraph) -> bytes:
    return json.dumps(graph_to_json(graph), ensure_ascii=False).encode("utf-8")


# --------------------------------------------------------------------------- block trees


@dataclass(frozen=True)
class Act:
    label: str
    node_id: str

    def __post_init__(self):
        if not self.label or not self.label.strip():
            raise ValidationError("activity with empty label", self.node_id)
        if not _ID_RE.match(self.node_id):
            raise ValidationError(f"invalid node id {self.node_id!r}", self.node_id)


@dataclass(frozen=True)
class Seq:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise ValidationError("Seq needs at least 2 children")


@dataclass(frozen=True)
class _Choice:
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) < 2:
            raise ValidationError(f"{type(self).__name__} needs at least 2 branches")


class Xor(_Choice):
    pass


class And(_Choice):
    pass


class Or(_Choice):
    pass


@dataclass(frozen=True)
class Loop:
    body: object
    max_unroll: int = 2

    def __post_init__(self):
        if not isinstance(self.max_unroll, int) or self.max_unroll < 1:
            raise ValidationError("Loop max_unroll must be a positive integer")


BlockTree = Union[Act, Seq, Xor, And, Or, Loop]
CHOICE_TYPES = {"xor": Xor, "and": And, "or": Or}
CHOICE_KIND = {Xor: "xor", And: "and", Or: "or"}


@dataclass(frozen=True)
class Unstructured:
    """Result of a decomposition that got stuck; ``remnant`` counts irreducible nodes."""

    remnant: int


def iter_nodes(tree) -> Iterator:
    """Pre-order walk over every block-tree node."""
    stack = [tree]
    while stack:
        t = stack.pop()
        yield t
        if isinstance(t, Seq):
            stack.extend(reversed(t.children))
        elif isinstance(t, _Choice):
            stack.extend(reversed(t.branches))
        elif isinstance(t, Loop):
            stack.append(t.body)


def activities(tree) -> list[Act]:
    return [t for t in iter_nodes(tree) if isinstance(t, Act)]


def _first_is_loop(tree) -> bool:
    while isinstance(tree, Seq):
        tree = tree.children[0]
    return isinstance(tree, Loop)


def _last_is_loop(tree) -> bool:
    while isinstance(tree, Seq):
        tree = tree.children[-1]
    return isinstance(tree, Loop)


def validate_tree(tree) -> None:
    """Whole-tree checks that single constructors cannot see."""
    ids = set()
    for act in activities(tree):
        if act.node_id in ids:
            raise ValidationError(f"duplicate activity id {act.node_id}", act.node_id)
        if _GATEWAY_ID_RE.match(act.node_id):
            raise ValidationError(f"activity id {act.node_id} collides with gateway ids", act.node_id)
        ids.add(act.node_id)
    # a loop at either end would give the flat graph an entry with in-edges or an exit with out-edges
    if _first_is_loop(tree) or _last_is_loop(tree):
        raise ValidationError("a process cannot start or end with a loop")


def canonical(tree):
    """Hashable form with nested Seqs flattened and choice branches unordered."""
    if isinstance(tree, Act):
        return ("act", tree.label, tree.node_id)
    if isinstance(tree, Seq):
        parts = []
        for c in tree.children:
            cc = canonical(c)
            if cc[0] == "seq":
                parts.extend(cc[1])
            else:
                parts.append(cc)
        return ("seq", tuple(parts))
    if isinstance(tree, _Choice):
        return (CHOICE_KIND[type(tree)], tuple(sorted((canonical(b) for b in tree.branches), key=repr)))
    if isinstance(tree, Loop):
        return ("loop", canonical(tree.body), tree.max_unroll)
    raise TypeError(f"not a block tree: {tree!r}")


def same_tree(a, b) -> bool:
    return canonical(a) == canonical(b)


def tree_node_to_json(tree) -> dict:
    if isinstance(tree, Act):
        return {"type": "act", "label": tree.label, "node_id": tree.node_id}
    if isinstance(tree, Seq):
        return {"type": "seq", "children": [tree_node_to_json(c) for c in tree.children]}
    if isinstance(tree, _Choice):
        return {"type": CHOICE_KIND[type(tree)], "branches": [tree_node_to_json(b) for b in tree.branches]}
    if isinstance(tree, Loop):
        return {"type": "loop", "body": tree_node_to_json(tree.body), "max_unroll": tree.max_unroll}
    raise TypeError(f"not a block tree: {tree!r}")


def tree_node_from_json(doc):
    kind = doc["type"]
    if kind == "act":
        return Act(doc["label"], doc["node_id"])
    if kind == "seq":
        return Seq(tuple(tree_node_from_json(c) for c in doc["children"]))
    if kind in CHOICE_TYPES:
        return CHOICE_TYPES[kind](tuple(tree_node_from_json(b) for b in doc["branches"]))
    if kind == "loop":
        return Loop(tree_node_from_json(doc["body"]), doc.get("max_unroll", 2))
    raise SchemaError(f"unknown block type {kind!r}")


def tree_to_json(tree, tree_id: str) -> dict:
    return {"id": tree_id, "root": tree_node_to_json(tree)}


def tree_from_json(doc) -> tuple[str, BlockTree]:
    """Returns ``(id, tree)``; raises SchemaError / ValidationError."""
    try:
        jsonschema.validate(doc, _load_schema("tree.schema.json"))
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"block tree: {exc.message}") from None
    tree = tree_node_from_json(doc["root"])
    validate_tree(tree)
    return doc["id"], tree


# --------------------------------------------------------------------------- conversions


@dataclass
class _Flattener:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    counter: int = 0

    def build(self, t) -> tuple[str, str]:
        if isinstance(t, Act):
            self.nodes.append(Node(t.node_id, ACTIVITY, label=t.label))
            return t.node_id, t.node_id
        if isinstance(t, Seq):
            first = last = None
            for child in t.children:
                f, l = self.build(child)
                if last is not None:
                    self.edges.append((last, f))
                else:
                    first = f
                last = l
            return first, last
        self.counter += 1
        k = self.counter
        if isinstance(t, _Choice):
            kind = CHOICE_KIND[type(t)]
            split, join = f"g{k}s", f"g{k}j"
            self.nodes.append(Node(split, GATEWAY, gateway_kind=kind, gateway_role="split"))
            for b in t.branches:
                f, l = self.build(b)
                self.edges.append((split, f))
                self.edges.append((l, join))
            self.nodes.append(Node(join, GATEWAY, gateway_kind=kind, gateway_role="join"))
            return split, join
        if isinstance(t, Loop):
            # while-loop skeleton: join -> split -> body -> join, split -> onward
            join, split = f"l{k}j", f"l{k}s"
            self.nodes.append(Node(join, GATEWAY, gateway_kind="xor", gateway_role="join"))
            self.nodes.append(Node(split, GATEWAY, gateway_kind="xor", gateway_role="split"))
            self.edges.append((join, split))
            f, l = self.build(t.body)
            self.edges.append((split, f))
            self.edges.append((l, join))
            return join, split
        raise TypeError(f"not a block tree: {t!r}")


def flatten(tree, graph_id: str) -> ProcessGraph:
    """Deterministic flat graph for a block tree.

    Choice blocks get gateways ``g<k>s``/``g<k>j`` and loops ``l<k>j``/``l<k>s``,
    numbered in pre-order.
    """
    validate_tree(tree)
    fl = _Flattener()
    entry, exit_ = fl.build(tree)
    return ProcessGraph(graph_id, tuple(fl.nodes), tuple(fl.edges), entry, exit_)


def _seq(a, b) -> Seq:
    parts = []
    for x in (a, b):
        parts.extend(x.children if isinstance(x, Seq) else (x,))
    return Seq(tuple(parts))


def decompose(graph: ProcessGraph):
    """Reduce a flat graph to a block tree, or return :class:`Unstructured`.

    Rules, applied until nothing changes: merge chains of reduced nodes into a
    Seq; collapse a split whose branches are single reduced nodes meeting at a
    join of the same kind; collapse a while-loop skeleton (xor join -> xor
    split -> body -> join) into a Loop.
    """
    frag = {}
    gw = {}
    for n in graph.nodes:
        if n.is_activity:
            frag[n.id] = Act(n.label, n.id)
        else:
            frag[n.id] = None
            gw[n.id] = (n.gateway_kind, n.gateway_role)
    succ = {k: list(v) for k, v in graph.successors.items()}
    pred = {k: list(v) for k, v in graph.predecessors.items()}
    order = [n.id for n in graph.nodes]

    def replace(lst, old, new):
        return [new if x == old else x for x in lst]

    def drop(nid):
        del frag[nid], succ[nid], pred[nid]
        order.remove(nid)

    changed = True
    while changed and len(order) > 1:
        changed = False
        for u in list(order):
            if u not in frag:
                continue
            # chains
            if frag[u] is not None and len(succ[u]) == 1:
                v = succ[u][0]
                if v != u and frag[v] is not None and pred[v] == [u]:
                    frag[u] = _seq(frag[u], frag[v])
                    succ[u] = succ[v]
                    for w in succ[v]:
                        pred[w] = replace(pred[w], v, u)
                    drop(v)
                    changed = True
                    continue
            if frag[u] is not None:
                continue
            kind, role = gw[u]
            # split/join blocks
            if role == "split" and len(succ[u]) >= 2:
                branches = succ[u]
                joins = set()
                ok = True
                for b in branches:
                    if frag[b] is None or pred[b] != [u] or len(succ[b]) != 1:
                        ok = False
                        break
                    joins.add(succ[b][0])
                if ok and len(joins) == 1:
                    j = joins.pop()
                    if frag[j] is None and gw[j] == (kind, "join") and sorted(pred[j]) == sorted(branches):
                        frag[u] = CHOICE_TYPES[kind](tuple(frag[b] for b in branches))
                        gw.pop(u)
                        succ[u] = succ[j]
                        for w in succ[j]:
                            pred[w] = replace(pred[w], j, u)
                        for b in branches:
                            drop(b)
                        drop(j)
                        changed = True
                        continue
            # while-loops
            if gw.get(u) == ("xor", "join") and len(pred[u]) == 2 and len(succ[u]) == 1:
                s = succ[u][0]
                if s != u and frag.get(s, 0) is None and gw[s] == ("xor", "split") and pred[s] == [u] and len(succ[s]) == 2:
                    for b in succ[s]:
                        if frag[b] is not None and pred[b] == [s] and succ[b] == [u]:
                            (outside_in,) = [p for p in pred[u] if p != b]
                            (outside_out,) = [q for q in succ[s] if q != b]
                            frag[u] = Loop(frag[b])
                            gw.pop(u)
                            pred[u] = [outside_in]
                            succ[u] = [outside_out]
                            pred[outside_out] = replace(pred[outside_out], s, u)
                            drop(b)
                            drop(s)
                            changed = True
                            break
    if len(order) == 1 and frag[order[0]] is not None:
        return frag[order[0]]
    return Unstructured(len(order))


@dataclass(frozen=True)
class ProcessText:
    sentences: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if not self.sentences:
            raise ValidationError("process text needs at least one sentence")
        for i, s in enumerate(self.sentences):
            if not isinstance(s, str) or not s.strip():
                raise ValidationError(f"sentence {i} is empty", str(i))

    def __str__(self) -> str:
        return " ".join(self.sentences)


def check_score(value: float) -> float:
    """Validate a consistency score in [0, 1] and return it as a float."""
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"consistency score {value} outside [0, 1]")
    return value
