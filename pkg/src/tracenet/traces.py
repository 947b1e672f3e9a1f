"""Process graph traces (PGTs).

Three producers:

* :func:`enumerate_traces` walks a block tree and builds its trace space
  compositionally (sequence = concatenation, xor = union, and = interleavings,
  or = interleavings of every non-empty branch subset, loop = bounded repeats).
* :func:`sample_traces` plays the token game on a flat graph.
* :func:`structural_walks` ignores execution semantics and does uniform random
  walks on the undirected graph (the DeepWalk-style corpus).
"""

from __future__ import annotations

import enum
import io
import random
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Iterable, TextIO

from .graph import (
    CHOICE_KIND,
    Act,
    Loop,
    ProcessGraph,
    Seq,
    _Choice,
    back_edges,
    validate_tree,
)

Trace = tuple  # tuple of node ids

CORPUS_HEADER = "#tracewalk-corpus v1"


class TraceError(Exception):
    pass


class CapTooSmall(TraceError, ValueError):
    pass


class DeadlockError(TraceError):
    """A token-game run got stuck or completed improperly."""

    def __init__(self, message: str, marking: dict | None = None):
        super().__init__(message)
        self.marking = marking or {}


class UnknownToken(TraceError, KeyError):
    pass


@dataclass(frozen=True)
class TraceCaps:
    max_traces: int = 1000
    max_len: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.max_traces < 1:
            raise CapTooSmall(f"max_traces must be >= 1, got {self.max_traces}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class TraceSet:
    traces: tuple[Trace, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def as_set(self) -> set[Trace]:
        return set(self.traces)


# --------------------------------------------------------------------------- block-tree enumeration


def _annotate(tree):
    """Mirror of flatten()'s gateway numbering, as plain tuples."""
    counter = 0

    def walk(t):
        nonlocal counter
        if isinstance(t, Act):
            return ("act", t.node_id)
        if isinstance(t, Seq):
            return ("seq", [walk(c) for c in t.children])
        counter += 1
        k = counter
        if isinstance(t, _Choice):
            return (CHOICE_KIND[type(t)], f"g{k}s", f"g{k}j", [walk(b) for b in t.branches])
        if isinstance(t, Loop):
            return ("loop", f"l{k}j", f"l{k}s", walk(t.body), t.max_unroll)
        raise TypeError(f"not a block tree: {t!r}")

    return walk(tree)


def _conv(a: dict, b: dict) -> dict:
    out: dict[int, int] = {}
    for la, ca in a.items():
        for lb, cb in b.items():
            out[la + lb] = out.get(la + lb, 0) + ca * cb
    return out


def _shuffle_conv(a: dict, b: dict) -> dict:
    """Length distribution of all interleavings of one trace from each side."""
    out: dict[int, int] = {}
    for la, ca in a.items():
        for lb, cb in b.items():
            out[la + lb] = out.get(la + lb, 0) + ca * cb * comb(la + lb, la)
    return out


def _shift(a: dict, k: int) -> dict:
    return {l + k: c for l, c in a.items()}


def _add(a: dict, b: dict) -> dict:
    out = dict(a)
    for l, c in b.items():
        out[l] = out.get(l, 0) + c
    return out


def _subsets(n: int):
    for m in range(1, n + 1):
        yield from combinations(range(n), m)


class _Space:
    """Counts traces by length for every annotated node, memoised by id()."""

    def __init__(self):
        self.memo: dict[int, dict] = {}
        self.aux: dict[tuple, object] = {}

    def dist(self, node) -> dict:
        key = id(node)
        if key in self.memo:
            return self.memo[key]
        kind = node[0]
        if kind == "act":
            d = {1: 1}
        elif kind == "seq":
            d = self.suffix(node, 0)
        elif kind == "xor":
            d = {}
            for b in node[3]:
                d = _add(d, self.dist(b))
            d = _shift(d, 2)
        elif kind == "and":
            d = _shift(self.interleave(node[3], 0), 2)
        elif kind == "or":
            d = {}
            for sub in _subsets(len(node[3])):
                d = _add(d, self.interleave([node[3][i] for i in sub], 0, key=(id(node), sub)))
            d = _shift(d, 2)
        elif kind == "loop":
            d = {}
            for r in range(node[4] + 1):
                d = _add(d, _shift(self.repeats(node, r), 2))
        else:
            raise TypeError(kind)
        self.memo[key] = d
        return d

    def suffix(self, node, i: int) -> dict:
        key = ("seq", id(node), i)
        if key not in self.aux:
            children = node[1]
            if i == len(children) - 1:
                self.aux[key] = self.dist(children[i])
            else:
                self.aux[key] = _conv(self.dist(children[i]), self.suffix(node, i + 1))
        return self.aux[key]

    def interleave(self, branches, i: int, key=None) -> dict:
        k = ("and", key if key is not None else id(branches), i)
        if k not in self.aux:
            if i == len(branches) - 1:
                self.aux[k] = self.dist(branches[i])
            else:
                self.aux[k] = _shuffle_conv(self.dist(branches[i]), self.interleave(branches, i + 1, key))
        return self.aux[k]

    def repeats(self, node, r: int) -> dict:
        k = ("loop", id(node), r)
        if k not in self.aux:
            if r == 0:
                self.aux[k] = {0: 1}
            else:
                unit = _shift(self.dist(node[3]), 2)
                self.aux[k] = _conv(unit, self.repeats(node, r - 1))
        return self.aux[k]


def _interleavings(a: Trace, b: Trace):
    n = len(a) + len(b)
    for pos in combinations(range(n), len(a)):
        out = []
        ia = ib = 0
        ps = set(pos)
        for k in range(n):
            if k in ps:
                out.append(a[ia])
                ia += 1
            else:
                out.append(b[ib])
                ib += 1
        yield tuple(out)


def _all_interleavings(sets: list[list[Trace]]) -> list[Trace]:
    acc = sets[0]
    for nxt in sets[1:]:
        acc = [t for x in acc for y in nxt for t in _interleavings(x, y)]
    return acc


def _generate(node) -> list[Trace]:
    kind = node[0]
    if kind == "act":
        return [(node[1],)]
    if kind == "seq":
        acc = [()]
        for c in node[1]:
            sub = _generate(c)
            acc = [x + y for x in acc for y in sub]
        return acc
    if kind in ("xor", "and", "or"):
        _, s, j, branches = node
        subs = [_generate(b) for b in branches]
        if kind == "xor":
            inner = [t for sub in subs for t in sub]
        elif kind == "and":
            inner = _all_interleavings(subs)
        else:
            inner = []
            for subset in _subsets(len(subs)):
                inner.extend(_all_interleavings([subs[i] for i in subset]))
        return [(s,) + t + (j,) for t in inner]
    if kind == "loop":
        _, j, s, body, m = node
        bodies = _generate(body)
        out = []
        reps = [()]
        for _r in range(m + 1):
            out.extend((j, s) + t for t in reps)
            reps = [t + b + (j, s) for t in reps for b in bodies]
        return out
    raise TypeError(kind)


def _pick(weights: list[int], rng: random.Random) -> int:
    total = sum(weights)
    x = rng.randrange(total)
    for i, w in enumerate(weights):
        if x < w:
            return i
        x -= w
    raise AssertionError("unreachable")


class _UniformSampler:
    """Uniform draws from a block tree's trace space, by counting."""

    def __init__(self, root, rng: random.Random):
        self.space = _Space()
        self.root = root
        self.rng = rng

    def draw(self) -> Trace:
        d = self.space.dist(self.root)
        lengths = sorted(d)
        length = lengths[_pick([d[l] for l in lengths], self.rng)]
        return tuple(self.sample(self.root, length))

    def sample(self, node, length: int) -> list:
        sp, rng = self.space, self.rng
        kind = node[0]
        if kind == "act":
            return [node[1]]
        if kind == "seq":
            children = node[1]
            out = []
            for i, c in enumerate(children):
                if i == len(children) - 1:
                    out.extend(self.sample(c, length))
                    break
                dc, rest = sp.dist(c), sp.suffix(node, i + 1)
                opts = [l for l in dc if length - l in rest]
                l = opts[_pick([dc[l] * rest[length - l] for l in opts], rng)]
                out.extend(self.sample(c, l))
                length -= l
            return out
        if kind == "xor":
            _, s, j, branches = node
            inner = length - 2
            w = [sp.dist(b).get(inner, 0) for b in branches]
            b = branches[_pick(w, rng)]
            return [s] + self.sample(b, inner) + [j]
        if kind == "and":
            _, s, j, branches = node
            return [s] + self.sample_interleaved(branches, length - 2, id(branches)) + [j]
        if kind == "or":
            _, s, j, branches = node
            inner = length - 2
            subsets = list(_subsets(len(branches)))
            w = [sp.interleave([branches[i] for i in sub], 0, key=(id(node), sub)).get(inner, 0) for sub in subsets]
            sub = subsets[_pick(w, rng)]
            chosen = [branches[i] for i in sub]
            return [s] + self.sample_interleaved(chosen, inner, (id(node), sub)) + [j]
        if kind == "loop":
            _, j, s, body, m = node
            inner = length - 2
            w = [sp.repeats(node, r).get(inner, 0) for r in range(m + 1)]
            r = _pick(w, rng)
            out = [j, s]
            unit = _shift(sp.dist(body), 2)
            for k in range(r, 0, -1):
                rest = sp.repeats(node, k - 1)
                opts = [l for l in unit if inner - l in rest]
                l = opts[_pick([unit[l] * rest[inner - l] for l in opts], rng)]
                out.extend(self.sample(body, l - 2))
                out.extend([j, s])
                inner -= l
            return out
        raise TypeError(kind)

    def sample_interleaved(self, branches, length: int, key) -> list:
        sp, rng = self.space, self.rng
        parts = []
        for i, b in enumerate(branches):
            if i == len(branches) - 1:
                parts.append(self.sample(b, length))
                break
            db, rest = sp.dist(b), sp.interleave(branches, i + 1, key)
            opts = [l for l in db if length - l in rest]
            w = [db[l] * rest[length - l] * comb(length, l) for l in opts]
            l = opts[_pick(w, rng)]
            parts.append(self.sample(b, l))
            length -= l
        # uniform shuffle of the parts, preserving each part's internal order
        labels = [i for i, p in enumerate(parts) for _ in p]
        rng.shuffle(labels)
        cursors = [0] * len(parts)
        out = []
        for i in labels:
            out.append(parts[i][cursors[i]])
            cursors[i] += 1
        return out


def count_traces(tree) -> int:
    """Size of a block tree's trace space, without materialising it."""
    return sum(_Space().dist(_annotate(tree)).values())


def enumerate_traces(tree, caps: TraceCaps = TraceCaps()) -> TraceSet:
    """All traces of a block tree, or a uniform sample of ``caps.max_traces`` of them.

    Gateway tokens use the ids :func:`~tracenet.graph.flatten` would assign.
    """
    if caps.max_traces < 1:
        raise CapTooSmall(f"max_traces must be >= 1, got {caps.max_traces}")
    validate_tree(tree)
    root = _annotate(tree)
    total = sum(_Space().dist(root).values())
    if total <= caps.max_traces:
        return TraceSet(tuple(dict.fromkeys(_generate(root))), truncated=False)
    sampler = _UniformSampler(root, random.Random(caps.seed))
    picked: dict[Trace, None] = {}
    attempts = 0
    while len(picked) < caps.max_traces and attempts < 100 * caps.max_traces:
        picked.setdefault(sampler.draw(), None)
        attempts += 1
    return TraceSet(tuple(picked), truncated=True)


# --------------------------------------------------------------------------- token game


def _reach_from(start: str, adj: dict[str, list[str]]) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


class _TokenGame:
    """Token-game semantics on a flat graph.

    Tokens live on edges. Slot 0 is a virtual edge into the entry and the last
    slot is a virtual edge out of the exit; a proper run ends with exactly one
    token in that last slot and nothing else.
    """

    def __init__(self, graph: ProcessGraph):
        self.graph = graph
        self.edges = [(None, graph.entry)] + list(graph.edges) + [(graph.exit, None)]
        self.index = {e: i for i, e in enumerate(self.edges)}
        self.done = len(self.edges) - 1
        self.inputs = {n.id: [] for n in graph.nodes}
        self.outputs = {n.id: [] for n in graph.nodes}
        for i, (a, b) in enumerate(self.edges):
            if b is not None:
                self.inputs[b].append(i)
            if a is not None:
                self.outputs[a].append(i)
        self.order = [n.id for n in graph.nodes]
        back = back_edges(graph)
        self.back = {self.index[e] for e in back}
        forward: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
        for a, b in graph.edges:
            if (a, b) not in back:
                forward[a].append(b)
        reach = {nid: _reach_from(nid, forward) for nid in forward}
        # For OR joins: per empty input, the edge slots that can still feed it.
        self.or_upstream: dict[str, dict[int, frozenset[int]]] = {}
        for n in graph.nodes:
            if n.is_gateway and n.gateway_kind == "or" and n.gateway_role == "join":
                # back edges of loops around the join only feed it in a later iteration
                closed = {self.index[(x, h)] for x, h in back if n.id in reach[h] and x in reach[n.id]}
                self.or_upstream[n.id] = {i: self._upstream(i, n.id, closed) for i in self.inputs[n.id]}

    def _upstream(self, slot: int, blocker: str, closed: set[int]) -> frozenset[int]:
        seen = {slot}
        stack = [slot]
        while stack:
            e = stack.pop()
            src = self.edges[e][0]
            if src is None or src == blocker:
                continue
            for i in self.inputs[src]:
                if i not in seen and i not in closed:
                    seen.add(i)
                    stack.append(i)
        return frozenset(seen - {slot})

    def initial(self) -> tuple[int, ...]:
        m = [0] * len(self.edges)
        m[0] = 1
        return tuple(m)

    def enabled(self, marking) -> list[str]:
        out = []
        g = self.graph
        for nid in self.order:
            ins = self.inputs[nid]
            node = g[nid]
            if node.is_gateway and node.gateway_role == "join" and node.gateway_kind == "and":
                ok = all(marking[i] > 0 for i in ins)
            elif node.is_gateway and node.gateway_role == "join" and node.gateway_kind == "or":
                filled = [i for i in ins if marking[i] > 0]
                ok = bool(filled) and all(
                    not any(marking[u] > 0 for u in self.or_upstream[nid][i]) for i in ins if marking[i] == 0
                )
            else:
                ok = any(marking[i] > 0 for i in ins)
            if ok:
                out.append(nid)
        return out

    def consume(self, marking: list, nid: str) -> None:
        node = self.graph[nid]
        ins = self.inputs[nid]
        if node.is_gateway and node.gateway_role == "join" and node.gateway_kind in ("and", "or"):
            for i in ins:
                if marking[i] > 0:
                    marking[i] -= 1
        else:
            for i in ins:
                if marking[i] > 0:
                    marking[i] -= 1
                    break

    def output_options(self, nid: str) -> list[tuple[int, ...]]:
        """Every way the node may place tokens on its outgoing slots."""
        node = self.graph[nid]
        outs = self.outputs[nid]
        if node.is_gateway and node.gateway_role == "split":
            if node.gateway_kind == "xor":
                return [(o,) for o in outs]
            if node.gateway_kind == "or":
                return [tuple(outs[i] for i in sub) for sub in _subsets(len(outs))]
        return [tuple(outs)]

    def describe(self, marking) -> dict:
        return {f"{a}->{b}": c for (a, b), c in zip(self.edges, marking) if c}

    def check_final(self, marking) -> None:
        if marking[self.done] == 1 and sum(marking) == 1:
            return
        if marking[self.done] == 0:
            raise DeadlockError("run deadlocked before reaching the exit", self.describe(marking))
        raise DeadlockError("run completed improperly (exit fired twice or tokens left behind)", self.describe(marking))


def sample_traces(graph: ProcessGraph, caps: TraceCaps = TraceCaps()) -> TraceSet:
    """Distinct traces from seeded random token-game runs.

    Runs longer than ``caps.max_len`` are discarded. Stops at ``caps.max_traces``
    distinct traces or ``10 * caps.max_traces`` runs, whichever comes first.
    """
    game = _TokenGame(graph)
    rng = random.Random(caps.seed)
    found: dict[Trace, None] = {}
    for _attempt in range(10 * caps.max_traces):
        if len(found) >= caps.max_traces:
            break
        marking = list(game.initial())
        trace = []
        while True:
            enabled = game.enabled(marking)
            if not enabled:
                break
            nid = enabled[rng.randrange(len(enabled))] if len(enabled) > 1 else enabled[0]
            game.consume(marking, nid)
            opts = game.output_options(nid)
            for slot in opts[rng.randrange(len(opts))] if len(opts) > 1 else opts[0]:
                marking[slot] += 1
            trace.append(nid)
            if len(trace) > caps.max_len:
                break
        if len(trace) > caps.max_len:
            continue
        game.check_final(marking)
        found.setdefault(tuple(trace), None)
    truncated = len(found) >= caps.max_traces
    return TraceSet(tuple(found), truncated=truncated)


def token_game_runs(graph: ProcessGraph, max_loops: int = 2, max_len: int = 200) -> set[Trace]:
    """Exhaustive set of terminating token-game traces.

    Each back edge may carry a token at most ``max_loops`` times per run, which
    bounds loops the same way a block tree's ``max_unroll`` does for non-nested
    loops. Raises DeadlockError on the first improper run found.
    """
    game = _TokenGame(graph)
    results: set[Trace] = set()
    back = sorted(game.back)
    seen: set = set()
    stack = [(game.initial(), (), (0,) * len(back))]
    while stack:
        marking, trace, loops = stack.pop()
        key = (marking, trace)
        if key in seen:
            continue
        seen.add(key)
        enabled = game.enabled(marking)
        if not enabled:
            game.check_final(marking)
            results.add(trace)
            continue
        if len(trace) >= max_len:
            continue
        for nid in enabled:
            base = list(marking)
            game.consume(base, nid)
            for opt in game.output_options(nid):
                m = list(base)
                lp = list(loops)
                ok = True
                for slot in opt:
                    m[slot] += 1
                    if slot in game.back:
                        k = back.index(slot)
                        lp[k] += 1
                        ok = ok and lp[k] <= max_loops
                if ok:
                    stack.append((tuple(m), trace + (nid,), tuple(lp)))
    return results


# --------------------------------------------------------------------------- structure-only walks


def random_walks(adjacency: dict[str, list[str]], n_walks: int, walk_len: int, seed: int) -> list[Trace]:
    """``n_walks`` uniform random walks of ``walk_len`` tokens from every node."""
    rng = random.Random(seed)
    starts = list(adjacency)
    walks = []
    for _ in range(n_walks):
        for start in starts:
            walk = [start]
            while len(walk) < walk_len:
                nbrs = adjacency[walk[-1]]
                if not nbrs:
                    break
                walk.append(nbrs[rng.randrange(len(nbrs))])
            walks.append(tuple(walk))
    return walks


def structural_walks(graph: ProcessGraph, n_walks: int, walk_len: int, seed: int) -> TraceSet:
    """DeepWalk-style corpus: walks on the undirected graph, no gateway semantics."""
    adj: dict[str, set[str]] = {n.id: set() for n in graph.nodes}
    for a, b in graph.edges:
        adj[a].add(b)
        adj[b].add(a)
    adjacency = {nid: sorted(adj[nid]) for nid in (n.id for n in graph.nodes)}
    return TraceSet(tuple(random_walks(adjacency, n_walks, walk_len, seed)), truncated=False)


# --------------------------------------------------------------------------- projections and files


class Projection(str, enum.Enum):
    ACTIVITIES = "activities"
    GATEWAYS = "gateways"
    ALL = "all"


def project_trace(trace: Trace, graph: ProcessGraph, mode: Projection | str) -> Trace:
    mode = Projection(mode)
    nodes = graph.node_map
    for tok in trace:
        if tok not in nodes:
            raise UnknownToken(tok)
    if mode is Projection.ALL:
        return tuple(trace)
    want_activity = mode is Projection.ACTIVITIES
    return tuple(t for t in trace if nodes[t].is_activity == want_activity)


def write_corpus(sentences: Iterable[tuple[str, Iterable[str]]], out: TextIO) -> int:
    """Write ``(graph_id, trace)`` pairs as a trace corpus; returns the line count."""
    out.write(CORPUS_HEADER + "\n")
    n = 0
    for gid, trace in sentences:
        out.write(" ".join(f"{gid}.{tok}" for tok in trace) + "\n")
        n += 1
    return n


def read_corpus(src: TextIO | str) -> list[list[str]]:
    """Read a trace corpus or whitespace-tokenised plain text, one sentence per line."""
    if isinstance(src, str):
        src = io.StringIO(src)
    out = []
    for i, line in enumerate(src):
        if i == 0 and line.startswith("#tracewalk-corpus"):
            continue
        toks = line.split()
        if toks:
            out.append(toks)
    return out
