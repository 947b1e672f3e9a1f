"""Small random block trees for oracle tests."""

import itertools
import random

from tracenet.graph import Act, And, Loop, Or, Seq, Xor
from tracenet.traces import count_traces

_KINDS = {"seq": Seq, "xor": Xor, "and": And, "or": Or}


def _sizes(rng, n, parts):
    cuts = sorted(rng.sample(range(1, n), parts - 1))
    return [b - a for a, b in zip([0] + cuts, cuts + [n])]


def random_tree(seed, max_acts=8, loops=True, max_traces=1000):
    """Random tree with at most ``max_acts`` activities and no nested loops.

    With loops enabled the core is framed by two activities so a loop can
    never sit at the process boundary. Draws whose trace space exceeds
    ``max_traces`` are redrawn so exhaustive oracles stay cheap.
    """
    rng = random.Random(seed)
    while True:
        tree = _draw(rng, max_acts, loops)
        if count_traces(tree) <= max_traces:
            return tree


def _draw(rng, max_acts, loops):
    ids = itertools.count(1)

    def act():
        i = next(ids)
        return Act(f"step {i}", f"a{i}")

    def build(n, depth, in_loop):
        if n == 1:
            return act()
        kinds = list(_KINDS) + (["loop"] if loops and not in_loop else [])
        kind = rng.choice(kinds) if depth < 3 else "seq"
        if kind == "loop":
            return Loop(build(n, depth + 1, True))
        parts = rng.randint(2, min(n, 3))
        return _KINDS[kind](tuple(build(s, depth + 1, in_loop) for s in _sizes(rng, n, parts)))

    if not loops:
        return build(rng.randint(max(2, max_acts - 3), max_acts), 0, False)
    first = act()
    core = build(rng.randint(max(1, max_acts - 5), max_acts - 2), 0, False)
    return Seq((first, core, act()))
