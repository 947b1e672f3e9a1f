"""Glue between the dataset, the embedding trainers and the TraceNet model."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .embed import SkipGramConfig, VectorTable, train_skipgram
from .forge import DatasetRow
from .graph import ProcessGraph, flatten
from .model import EncodedPair, ModelConfig, encode_pair, node_token, tokenize
from .traces import TraceCaps, count_traces, enumerate_traces, sample_traces, structural_walks

log = logging.getLogger(__name__)

TASK_MODES = {1: "activities", 2: "gateways", 3: "all"}


@dataclass(frozen=True)
class CorpusConfig:
    mode: str = "tracewalk"
    max_traces: int = 200
    max_len: int = 200
    walk_len: int = 0
    node_tokens: str = "instance"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("tracewalk", "deepwalk"):
            raise ValueError(f"unknown corpus mode {self.mode!r}")
        if self.node_tokens not in ("instance", "type"):
            raise ValueError(f"unknown node token scope {self.node_tokens!r}")


def unique_graphs(rows: Iterable[DatasetRow]) -> dict[str, ProcessGraph]:
    """Flattened graphs keyed by id, in first-seen order."""
    graphs: dict[str, ProcessGraph] = {}
    for row in rows:
        if row.graph_id not in graphs:
            graphs[row.graph_id] = flatten(row.tree, row.graph_id)
    return graphs


def unique_trees(rows: Iterable[DatasetRow]) -> dict[str, object]:
    trees: dict[str, object] = {}
    for row in rows:
        trees.setdefault(row.graph_id, row.tree)
    return trees


def _seed_for(seed: int, gid: str) -> int:
    return random.Random(f"{seed}:{gid}").getrandbits(63)


def node_corpus(trees: dict[str, object], cfg: CorpusConfig) -> list[list[str]]:
    """Sentences of node tokens: execution traces, or structure-only walks.

    Trace spaces larger than ``max_traces`` are sampled by the token game,
    which picks branches uniformly, so short alternatives next to large
    parallel blocks still show up. Walks match the trace corpus in sentence
    count and, unless ``walk_len`` is set, in mean length.
    """
    sentences: list[list[str]] = []
    for gid, tree in sorted(trees.items()):
        graph = flatten(tree, gid)
        caps = TraceCaps(cfg.max_traces, cfg.max_len, _seed_for(cfg.seed, gid))
        if count_traces(tree) <= cfg.max_traces:
            traces = enumerate_traces(tree, caps).traces
        else:
            traces = sample_traces(graph, caps).traces
        if cfg.mode == "deepwalk":
            length = cfg.walk_len or max(2, round(sum(map(len, traces)) / len(traces)))
            per_node = max(1, round(len(traces) / len(graph.nodes)))
            traces = structural_walks(graph, per_node, length, _seed_for(cfg.seed + 1, gid)).traces
        sentences.extend([node_token(graph, nid, cfg.node_tokens) for nid in t] for t in traces)
    return sentences


def word_corpus(rows: Iterable[DatasetRow]) -> list[list[str]]:
    """Tokenized texts, one sentence per line, each distinct graph's text once."""
    seen: set[tuple[str, ...]] = set()
    out = []
    for row in rows:
        key = row.text.sentences
        if key in seen:
            continue
        seen.add(key)
        out.extend(tokenize(s) for s in row.text.sentences)
    return [s for s in out if s]


def train_vectors(corpus: Sequence[Sequence[str]], dim: int, window: int = 5, epochs: int = 5,
                  lr: float = 0.025, seed: int = 0, workers: int = 1) -> VectorTable:
    cfg = SkipGramConfig(window=window, dim=dim, epochs=epochs, initial_lr=lr, seed=seed, workers=workers)
    return train_skipgram(corpus, cfg).vectors()


def encode_rows(rows: Sequence[DatasetRow], node_vectors, word_vectors, config: ModelConfig) -> list[EncodedPair]:
    graphs = unique_graphs(rows)
    missing: list[str] = []
    out = [encode_pair(graphs[r.graph_id], r.text, node_vectors, word_vectors, config, r.gold, missing) for r in rows]
    if missing:
        log.warning("%d node tokens had no vector (zero rows used), e.g. %s", len(missing), missing[0])
    return out
