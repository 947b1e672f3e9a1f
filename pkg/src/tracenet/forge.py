"""Synthetic graph-text pairs with behaviour-profile gold labels.

Random block trees are generated and mutated; each graph gets a template text;
the gold consistency of (G_i, text(G_j)) is the behavioural-profile similarity
of G_i and G_j.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence, TextIO

from .graph import (
    Act,
    And,
    CHOICE_KIND,
    CHOICE_TYPES,
    Loop,
    Or,
    ProcessGraph,
    ProcessText,
    Seq,
    ValidationError,
    Xor,
    _Choice,
    _first_is_loop,
    _last_is_loop,
    activities,
    decompose,
    tree_from_json,
    tree_to_json,
    validate_tree,
)
from .traces import TraceCaps, enumerate_traces, sample_traces

PATTERNS = ("seq", "xor", "and", "or", "loop")

VERBS = (
    "check", "approve", "send", "receive", "prepare", "review", "archive", "sign", "register", "inspect",
    "pack", "ship", "invoice", "validate", "update", "notify", "schedule", "assess", "file", "confirm",
    "record", "verify", "cancel", "forward", "print",
)
OBJECTS = (
    "order", "invoice", "claim", "contract", "payment", "request", "report", "shipment", "application",
    "document", "customer", "account", "form", "ticket", "quote", "receipt", "delivery", "complaint",
    "budget", "offer", "parcel", "schedule", "license", "refund", "policy",
)


class VocabExhausted(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    max_depth: int = 4
    branch_min: int = 2
    branch_max: int = 3
    weights: tuple[tuple[str, float], ...] = (("seq", 0.4), ("xor", 0.25), ("and", 0.2), ("or", 0.1), ("loop", 0.05))
    leaf_prob: float = 0.5
    verbs: tuple[str, ...] = VERBS
    objects: tuple[str, ...] = OBJECTS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple((k, float(w)) for k, w in dict(self.weights).items()))
        kinds = dict(self.weights)
        if set(kinds) - set(PATTERNS):
            raise ValueError(f"unknown pattern kinds {set(kinds) - set(PATTERNS)}")
        if abs(sum(kinds.values()) - 1.0) > 1e-9:
            raise ValueError("pattern weights must sum to 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 2 <= self.branch_min <= self.branch_max:
            raise ValueError("need 2 <= branch_min <= branch_max")
        if not 0.0 <= self.leaf_prob < 1.0:
            raise ValueError("leaf_prob must lie in [0, 1)")

    @property
    def labels(self) -> list[str]:
        return [f"{v} {o}" for v in self.verbs for o in self.objects]


class _Builder:
    def __init__(self, config: GenConfig, rng: random.Random):
        self.cfg = config
        self.rng = rng
        self.pool = config.labels
        rng.shuffle(self.pool)
        self.n_act = 0
        kinds = dict(config.weights)
        self.kinds = [k for k in PATTERNS if kinds.get(k, 0) > 0]
        self.kw = [kinds[k] for k in self.kinds]

    def act(self) -> Act:
        if not self.pool:
            raise VocabExhausted("ran out of unique activity labels")
        self.n_act += 1
        return Act(self.pool.pop(), f"a{self.n_act}")

    def width(self) -> int:
        return self.rng.randint(self.cfg.branch_min, self.cfg.branch_max)

    def block(self, depth: int):
        if depth >= self.cfg.max_depth or self.rng.random() < self.cfg.leaf_prob:
            return self.act()
        kind = self.rng.choices(self.kinds, weights=self.kw)[0]
        if kind == "loop":
            return Loop(self.block(depth + 1))
        parts = tuple(self.block(depth + 1) for _ in range(self.width()))
        if kind == "seq":
            return Seq(parts)
        return CHOICE_TYPES[kind](parts)


def gen_graph(config: GenConfig = GenConfig()):
    """Random block tree: a root Seq whose children are sampled recursively.

    Below ``max_depth`` each position becomes an activity with probability
    ``leaf_prob`` and otherwise a pattern drawn by ``weights``. Activities get
    unique verb-object labels and ids ``a1, a2, ...``.
    """
    b = _Builder(config, random.Random(config.seed))
    children = [b.block(1) for _ in range(b.width())]
    if _first_is_loop(children[0]):
        children.insert(0, b.act())
    if _last_is_loop(children[-1]):
        children.append(b.act())
    tree = Seq(tuple(children))
    validate_tree(tree)
    return tree


# --------------------------------------------------------------------------- mutation

OPS = ("swap", "regateway", "delete", "relabel")


def _get(tree, path):
    for i in path:
        tree = _kids(tree)[i]
    return tree


def _kids(t) -> tuple:
    if isinstance(t, Seq):
        return t.children
    if isinstance(t, _Choice):
        return t.branches
    if isinstance(t, Loop):
        return (t.body,)
    return ()


def _with_kids(t, kids):
    if isinstance(t, Seq):
        return Seq(kids) if len(kids) > 1 else kids[0]
    if isinstance(t, _Choice):
        return type(t)(kids)
    if isinstance(t, Loop):
        return Loop(kids[0], t.max_unroll)
    raise TypeError(t)


def _put(tree, path, new):
    if not path:
        return new
    kids = list(_kids(tree))
    kids[path[0]] = _put(kids[path[0]], path[1:], new)
    return _with_kids(tree, tuple(kids))


def _paths(tree, path=()):
    yield path, tree
    for i, k in enumerate(_kids(tree)):
        yield from _paths(k, path + (i,))


def _sites(tree, op: str) -> list:
    sites = []
    for path, t in _paths(tree):
        if op == "swap" and isinstance(t, Seq):
            sites.extend((path, i, j) for i, j in combinations(range(len(t.children)), 2))
        elif op == "regateway" and isinstance(t, _Choice):
            sites.append((path,))
        elif op == "delete":
            if isinstance(t, Seq):
                sites.extend((path, i) for i, c in enumerate(t.children) if isinstance(c, Act))
            elif isinstance(t, _Choice) and len(t.branches) > 2:
                sites.extend((path, i) for i, c in enumerate(t.branches) if isinstance(c, Act))
        elif op == "relabel" and isinstance(t, Act):
            sites.append((path,))
    return sites


def apply_op(tree, op: str, rng: random.Random, labels: Sequence[str] = GenConfig().labels):
    """Apply one mutation operator at a random site; ``None`` if no site fits."""
    sites = _sites(tree, op)
    if op == "relabel":
        used = {a.label for a in activities(tree)}
        fresh = [l for l in labels if l not in used]
        if not fresh:
            return None
    if not sites:
        return None
    site = sites[rng.randrange(len(sites))]
    node = _get(tree, site[0])
    if op == "swap":
        _, i, j = site
        kids = list(node.children)
        kids[i], kids[j] = kids[j], kids[i]
        new = Seq(tuple(kids))
    elif op == "regateway":
        kind = CHOICE_KIND[type(node)]
        other = [k for k in ("xor", "and", "or") if k != kind]
        new = CHOICE_TYPES[other[rng.randrange(2)]](node.branches)
    elif op == "delete":
        _, i = site
        kids = tuple(k for n, k in enumerate(_kids(node)) if n != i)
        new = _with_kids(node, kids)
    else:
        new = Act(fresh[rng.randrange(len(fresh))], node.node_id)
    result = _put(tree, site[0], new)
    try:
        validate_tree(result)
    except ValidationError:
        return None
    return result


@dataclass(frozen=True)
class Mutated:
    tree: object
    ops: tuple[str, ...]
    no_applicable_op: bool = False


def mutate(tree, n_ops: int, seed: int, labels: Sequence[str] = GenConfig().labels) -> Mutated:
    """Apply ``n_ops`` random operators (swap, gateway change, delete, relabel)."""
    rng = random.Random(seed)
    applied = []
    stuck = False
    for _ in range(n_ops):
        order = list(OPS)
        rng.shuffle(order)
        for op in order:
            new = apply_op(tree, op, rng, labels)
            if new is not None:
                tree = new
                applied.append(op)
                break
        else:
            stuck = True
            break
    return Mutated(tree, tuple(applied), stuck)


# --------------------------------------------------------------------------- text

_CONNECTIVES = ("Then", "Next", "After that")


class _Renderer:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.parts = 0

    def sequence(self, t, intro: str) -> list[str]:
        items = t.children if isinstance(t, Seq) else (t,)
        out = []
        for i, child in enumerate(items):
            if i == 0:
                lead = intro
            elif i == 1:
                lead = "Then"
            else:
                lead = _CONNECTIVES[self.rng.randrange(len(_CONNECTIVES))]
            out.extend(self.step(child, lead))
        return out

    def inline(self, branches) -> tuple[list[str], list[str]]:
        phrases, extra = [], []
        for b in branches:
            if isinstance(b, Act):
                phrases.append(b.label)
            else:
                self.parts += 1
                phrases.append(f"the steps of part {self.parts}")
                extra.extend(self.sequence(b, f"In part {self.parts}, first"))
        return phrases, extra

    def step(self, t, lead: str | None) -> list[str]:
        def opening(body: str) -> str:
            if lead is None:
                return body[0].upper() + body[1:]
            return f"{lead}, {body}"

        if isinstance(t, Act):
            return [opening(t.label) + "."]
        if isinstance(t, Seq):
            return self.sequence(t, lead or "First")
        if isinstance(t, Loop):
            phrases, extra = self.inline((t.body,))
            return [opening(f"the following may repeat: {phrases[0]}.")] + extra
        phrases, extra = self.inline(t.branches)
        if isinstance(t, Xor):
            body = "one of the following is performed: either " + ", or ".join(phrases) + "."
        elif isinstance(t, And):
            body = "the following are done in parallel: " + "; meanwhile, ".join(phrases) + "."
        else:
            body = "optionally, one or more of the following happen: " + "; ".join(phrases) + "."
        return [opening(body)] + extra


def generate_text(tree, seed: int = 0) -> ProcessText:
    """Template description of a block tree, one sentence per step or connective.

    A top-level sequence opens with ``First,`` and its second step with
    ``Then,``; later steps pick ``Then``/``Next``/``After that`` by seed.
    """
    r = _Renderer(random.Random(seed))
    if isinstance(tree, Seq):
        sentences = r.sequence(tree, "First")
    else:
        sentences = r.step(tree, None)
    return ProcessText(tuple(sentences))


# --------------------------------------------------------------------------- behaviour profiles

STRICT = "strict"
REVERSE = "reverse"
EXCLUSIVE = "exclusive"
INTERLEAVING = "interleaving"
SELF = "self"


@dataclass(frozen=True)
class BehaviorProfile:
    labels: tuple[str, ...]
    relation: dict = field(hash=False)

    def __getitem__(self, pair: tuple[str, str]) -> str:
        return self.relation[pair]

    def matrix(self) -> list[list[str]]:
        return [[self.relation[(a, b)] for b in self.labels] for a in self.labels]


def _label_traces(source, caps: TraceCaps) -> list[list[str]]:
    if isinstance(source, ProcessGraph):
        tree = decompose(source)
        if isinstance(tree, (Act, Seq, Xor, And, Or, Loop)):
            traces = enumerate_traces(tree, caps)
            labels = {a.node_id: a.label for a in activities(tree)}
        else:
            traces = sample_traces(source, caps)
            labels = {n.id: n.label for n in source.nodes if n.is_activity}
    else:
        traces = enumerate_traces(source, caps)
        labels = {a.node_id: a.label for a in activities(source)}
    return [[labels[t] for t in trace if t in labels] for trace in traces]


def profile_from_traces(label_traces: Iterable[Sequence[str]], labels: Iterable[str] | None = None) -> BehaviorProfile:
    before: set[tuple[str, str]] = set()
    seen: set[str] = set(labels or ())
    for trace in label_traces:
        first: dict[str, int] = {}
        last: dict[str, int] = {}
        for i, lab in enumerate(trace):
            first.setdefault(lab, i)
            last[lab] = i
        seen.update(first)
        for a in first:
            for b in last:
                if first[a] < last[b]:
                    before.add((a, b))
    ordered = tuple(sorted(seen))
    rel = {}
    for a in ordered:
        for b in ordered:
            if a == b:
                rel[(a, b)] = INTERLEAVING if (a, a) in before else SELF
                continue
            ab, ba = (a, b) in before, (b, a) in before
            if ab and ba:
                rel[(a, b)] = INTERLEAVING
            elif ab:
                rel[(a, b)] = STRICT
            elif ba:
                rel[(a, b)] = REVERSE
            else:
                rel[(a, b)] = EXCLUSIVE
    return BehaviorProfile(ordered, rel)


def behavior_profile(source, caps: TraceCaps = TraceCaps()) -> BehaviorProfile:
    """Weak-order behavioural profile over activity labels.

    ``a`` precedes ``b`` weakly if some trace has an ``a`` before a ``b``. Both
    directions give interleaving, one gives strict (or reverse) order, neither
    gives exclusiveness. Block trees and decomposable graphs use enumerated
    traces; other graphs use token-game samples.
    """
    if isinstance(source, ProcessGraph):
        names = [n.label for n in source.nodes if n.is_activity]
    else:
        names = [a.label for a in activities(source)]
    return profile_from_traces(_label_traces(source, caps), names)


def bp_similarity(p: BehaviorProfile, q: BehaviorProfile) -> float:
    """Share of unordered label pairs (over the label union) with equal relations.

    Pairs involving a label missing from either profile count as mismatches.
    """
    union = sorted(set(p.labels) | set(q.labels))
    pairs = list(combinations(union, 2))
    if not pairs:
        if set(p.labels) != set(q.labels):
            return 0.0
        return 1.0 if all(p.relation[(a, a)] == q.relation[(a, a)] for a in p.labels) else 0.0
    matched = 0
    for pair in pairs:
        if pair in p.relation and pair in q.relation and p.relation[pair] == q.relation[pair]:
            matched += 1
    return matched / len(pairs)


# --------------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class LabeledPair:
    graph_ref: int
    text: ProcessText
    gold: float
    provenance: tuple[int, int]
    split: str = "train"


@dataclass
class Dataset:
    graph_ids: list[str]
    trees: list
    texts: list[ProcessText]
    pairs: list[LabeledPair]
    n_base: int = 0

    def graph(self, ref: int):
        return self.graph_ids[ref], self.trees[ref]

    def split(self, name: str) -> list[LabeledPair]:
        return [p for p in self.pairs if p.split == name]


def _derive(seed: int, *parts: int) -> int:
    return random.Random(repr((seed,) + parts)).getrandbits(63)


def build_dataset(trees: Sequence, mutations_per_tree: int = 3, caps: TraceCaps = TraceCaps(), seed: int = 0,
                  cross_pairs: int = 1, n_ops: Sequence[int] = (1, 2, 4), train_ratio: float = 0.8,
                  labels: Sequence[str] = GenConfig().labels) -> Dataset:
    """Pairs every base graph with itself, its mutants, and ``cross_pairs`` foreign graphs.

    Each unordered graph pair (i, j) with i != j yields both (G_i, T_j) and
    (G_j, T_i) labelled with their profile similarity; i == j yields one pair.
    """
    if not trees:
        raise ValueError("need at least one tree")
    ids, all_trees, family = [], [], []
    for b, tree in enumerate(trees):
        ids.append(f"g{b:04d}")
        all_trees.append(tree)
        family.append(b)
    for b, tree in enumerate(trees):
        for v in range(mutations_per_tree):
            m = mutate(tree, n_ops[v % len(n_ops)], _derive(seed, 1, b, v), labels)
            ids.append(f"g{b:04d}m{v + 1}")
            all_trees.append(m.tree)
            family.append(b)
    texts = [generate_text(t, _derive(seed, 2, i)) for i, t in enumerate(all_trees)]
    profiles = [behavior_profile(t, caps) for t in all_trees]
    n_base = len(trees)
    variants = {b: [i for i in range(n_base, len(all_trees)) if family[i] == b] for b in range(n_base)}

    rng = random.Random(_derive(seed, 3))
    raw: list[tuple[int, int]] = []
    for b in range(n_base):
        raw.append((b, b))
        partners = list(variants[b])
        foreign = [i for i in range(len(all_trees)) if family[i] != b]
        for _ in range(min(cross_pairs, len(foreign))):
            partners.append(foreign[rng.randrange(len(foreign))])
        for j in partners:
            raw.append((b, j))
    pairs = []
    for i, j in raw:
        gold = bp_similarity(profiles[i], profiles[j])
        pairs.append(LabeledPair(i, texts[j], gold, (i, j)))
        if i != j:
            pairs.append(LabeledPair(j, texts[i], gold, (i, j)))
    rng.shuffle(pairs)
    n_train = int(round(train_ratio * len(pairs)))
    pairs = [LabeledPair(p.graph_ref, p.text, p.gold, p.provenance, "train" if k < n_train else "test")
             for k, p in enumerate(pairs)]
    return Dataset(ids, all_trees, texts, pairs, n_base)


def write_dataset(ds: Dataset, out: TextIO) -> None:
    """One JSON object per pair, keys sorted, no trailing spaces."""
    for p in ds.pairs:
        gid, tree = ds.graph(p.graph_ref)
        row = {
            "graph": tree_to_json(tree, gid),
            "text": list(p.text.sentences),
            "gold": p.gold,
            "split": p.split,
            "provenance": list(p.provenance),
        }
        out.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class DatasetRow:
    graph_id: str
    tree: object
    text: ProcessText
    gold: float
    split: str
    provenance: tuple[int, int]


def read_dataset(src: TextIO) -> list[DatasetRow]:
    import jsonschema

    from .graph import _load_schema

    schema = _load_schema("dataset_row.schema.json")
    rows = []
    for lineno, line in enumerate(src, 1):
        if not line.strip():
            continue
        doc = json.loads(line)
        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise ValueError(f"dataset line {lineno}: {exc.message}") from None
        gid, tree = tree_from_json(doc["graph"])
        rows.append(DatasetRow(gid, tree, ProcessText(tuple(doc["text"])), float(doc["gold"]), doc["split"],
                               tuple(doc["provenance"])))
    return rows
