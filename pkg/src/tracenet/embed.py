"""Skip-gram with hierarchical softmax over a Huffman tree.

Tokens are opaque strings, so the same trainer produces node vectors from
trace corpora and word vectors from plain text.
"""

from __future__ import annotations

import heapq
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._kernels import hs as _hs

log = logging.getLogger(__name__)


class EmbeddingError(Exception):
    pass


class EmptyVocab(EmbeddingError, ValueError):
    pass


class UnknownToken(EmbeddingError, KeyError):
    pass


class FormatError(EmbeddingError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    @property
    def index(self) -> dict[str, int]:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index", idx)
        return idx

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Tokens with count >= min_count, by descending count then lexicographically."""
    counter: Counter[str] = Counter()
    for sentence in corpus:
        counter.update(sentence)
    kept = sorted(((t, c) for t, c in counter.items() if c >= min_count), key=lambda tc: (-tc[1], tc[0]))
    if not kept:
        raise EmptyVocab(f"no token occurs at least {min_count} times")
    return Vocabulary(tuple(t for t, _ in kept), tuple(c for _, c in kept))


@dataclass(frozen=True)
class HuffmanTree:
    """Per-leaf paths from the root: inner-node indices and +1 (left) / -1 (right) signs."""

    points: tuple[tuple[int, ...], ...]
    signs: tuple[tuple[int, ...], ...]

    @property
    def inner_count(self) -> int:
        return max(len(self.points) - 1, 0)

    def code_lengths(self) -> list[int]:
        return [len(p) for p in self.points]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded ``points``/``signs`` matrices plus code lengths, as the kernels want them."""
        n = len(self.points)
        width = max([1] + self.code_lengths())
        pts = np.zeros((n, width), dtype=np.int32)
        sgn = np.zeros((n, width), dtype=np.float64)
        for i, (p, s) in enumerate(zip(self.points, self.signs)):
            pts[i, : len(p)] = p
            sgn[i, : len(s)] = s
        return pts, sgn, np.asarray(self.code_lengths(), dtype=np.int32)


def build_huffman(vocab: Vocabulary | Sequence[int]) -> HuffmanTree:
    """Huffman tree over token counts.

    Ties are broken by (weight, smallest token index contained); the first node
    popped becomes the left child. Inner node ``k`` is the k-th merge, so the
    root is inner node ``|V| - 2``.
    """
    counts = list(vocab.counts if isinstance(vocab, Vocabulary) else vocab)
    n = len(counts)
    if n == 0:
        raise EmptyVocab("cannot build a Huffman tree over no tokens")
    heap = [(c, i, i) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    parent = [0] * (2 * n - 1)
    is_left = [False] * (2 * n - 1)
    nxt = n
    while len(heap) > 1:
        w1, m1, a = heapq.heappop(heap)
        w2, m2, b = heapq.heappop(heap)
        parent[a], is_left[a] = nxt, True
        parent[b], is_left[b] = nxt, False
        heapq.heappush(heap, (w1 + w2, min(m1, m2), nxt))
        nxt += 1
    root = 2 * n - 2
    points, signs = [], []
    for leaf in range(n):
        pts, sgn = [], []
        node = leaf
        while node != root:
            pts.append(parent[node] - n)
            sgn.append(1 if is_left[node] else -1)
            node = parent[node]
        points.append(tuple(reversed(pts)))
        signs.append(tuple(reversed(sgn)))
    return HuffmanTree(tuple(points), tuple(signs))


def context_pairs(trace: Sequence, c: int) -> list[tuple]:
    """(center, context) pairs with 0 < |offset| <= c, clipped at the ends."""
    if c < 1:
        raise ValueError("window must be >= 1")
    out = []
    n = len(trace)
    for t in range(n):
        for j in range(max(0, t - c), min(n, t + c + 1)):
            if j != t:
                out.append((trace[t], trace[j]))
    return out


@dataclass(frozen=True)
class SkipGramConfig:
    window: int = 5
    dim: int = 100
    epochs: int = 5
    initial_lr: float = 0.025
    min_count: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("window", "dim", "epochs", "min_count", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")


@dataclass
class EmbeddingModel:
    vocab: Vocabulary
    tree: HuffmanTree
    input_vectors: np.ndarray
    inner_vectors: np.ndarray
    config: SkipGramConfig = field(default_factory=SkipGramConfig)
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def index_of(self, token: str) -> int:
        try:
            return self.vocab.index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def __getitem__(self, token: str) -> np.ndarray:
        return self.input_vectors[self.index_of(token)]

    def vectors(self) -> "VectorTable":
        return VectorTable(self.vocab.tokens, self.input_vectors.copy())


@dataclass
class HSGrad:
    center: int
    d_input: np.ndarray
    inner_rows: np.ndarray
    d_inner: np.ndarray


def _neg_log_sigmoid(x):
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_prob(model: EmbeddingModel, target: str, center: str) -> float:
    """log p(target | center) as a product of sigmoids along the target's path."""
    c, t = model.index_of(center), model.index_of(target)
    pts = np.asarray(model.tree.points[t], dtype=np.intp)
    sgn = np.asarray(model.tree.signs[t], dtype=np.float64)
    f = model.inner_vectors[pts] @ model.input_vectors[c]
    return float(-_neg_log_sigmoid(sgn * f).sum())


def hs_loss_and_grad(model: EmbeddingModel, center: str, target: str) -> tuple[float, HSGrad]:
    """Loss -log p(target|center) and its gradients.

    Per path node the derivative w.r.t. the score v'.v is
    ``(sigmoid(sign * score) - 1) * sign``.
    """
    c, t = model.index_of(center), model.index_of(target)
    pts = np.asarray(model.tree.points[t], dtype=np.intp)
    sgn = np.asarray(model.tree.signs[t], dtype=np.float64)
    v = model.input_vectors[c]
    inner = model.inner_vectors[pts]
    f = inner @ v
    loss = float(_neg_log_sigmoid(sgn * f).sum())
    g = (_sigmoid(sgn * f) - 1.0) * sgn
    return loss, HSGrad(c, g @ inner, pts, np.outer(g, v))


def _encode(corpus: Iterable[Sequence[str]], vocab: Vocabulary, window: int) -> tuple[np.ndarray, np.ndarray]:
    idx = vocab.index
    centers, targets = [], []
    for sentence in corpus:
        ids = [idx[t] for t in sentence if t in idx]
        for a, b in context_pairs(ids, window):
            centers.append(a)
            targets.append(b)
    return np.asarray(centers, dtype=np.int32), np.asarray(targets, dtype=np.int32)


def _run_epochs(model: EmbeddingModel, centers, targets, cfg: SkipGramConfig) -> list[float]:
    n = len(centers)
    history = []
    if n == 0:
        return history
    pts, sgn, lens = model.tree.arrays()
    total = cfg.epochs * n
    lr_end = cfg.initial_lr / 10.0
    syn0, syn1 = model.input_vectors, model.inner_vectors
    for epoch in range(cfg.epochs):
        start = epoch * n
        if cfg.workers == 1:
            loss = _hs.train_pairs(syn0, syn1, centers, targets, pts, sgn, lens,
                                   cfg.initial_lr, lr_end, start, total, np.zeros(model.dim))
        else:
            # hogwild: shards update shared rows without locks
            bounds = np.linspace(0, n, cfg.workers + 1).astype(int)
            losses = [0.0] * cfg.workers

            def work(w):
                lo, hi = bounds[w], bounds[w + 1]
                losses[w] = _hs.train_pairs(syn0, syn1, centers[lo:hi], targets[lo:hi], pts, sgn, lens,
                                            cfg.initial_lr, lr_end, start + lo, total, np.zeros(model.dim))

            threads = [threading.Thread(target=work, args=(w,)) for w in range(cfg.workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
            loss = sum(losses)
        history.append(loss / n)
        log.debug("epoch %d mean loss %.6f", epoch, loss / n)
    return history


def _init_inputs(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return (rng.random((rows, dim)) - 0.5) / dim


def train_skipgram(corpus: Iterable[Sequence[str]], config: SkipGramConfig = SkipGramConfig()) -> EmbeddingModel:
    """Train input (leaf) and inner-node vectors by SGD over every context pair.

    The learning rate decays linearly from ``initial_lr`` to ``initial_lr / 10``
    over all epochs. Single-worker runs are bit-reproducible for a fixed seed.
    """
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise EmptyVocab("empty corpus")
    vocab = build_vocab(corpus, config.min_count)
    tree = build_huffman(vocab)
    rng = np.random.default_rng(config.seed)
    model = EmbeddingModel(
        vocab=vocab,
        tree=tree,
        input_vectors=_init_inputs(rng, len(vocab), config.dim),
        inner_vectors=np.zeros((tree.inner_count, config.dim)),
        config=config,
    )
    centers, targets = _encode(corpus, vocab, config.window)
    model.loss_history = _run_epochs(model, centers, targets, config)
    return model


def corpus_loss(model: EmbeddingModel, corpus: Iterable[Sequence[str]], window: int | None = None) -> float:
    """Mean -log p(context | center) over every pair of the corpus."""
    centers, targets = _encode(corpus, model.vocab, window or model.config.window)
    if len(centers) == 0:
        return 0.0
    pts, sgn, lens = model.tree.arrays()
    return _hs.pairs_loss(model.input_vectors, model.inner_vectors, centers, targets, pts, sgn, lens) / len(centers)


def count_pairs(corpus: Iterable[Sequence[str]], model: EmbeddingModel) -> int:
    return len(_encode(corpus, model.vocab, model.config.window)[0])


def extend_vocab(model: EmbeddingModel, new_corpus: Iterable[Sequence[str]]) -> EmbeddingModel:
    """Add unseen tokens (appended, existing rows untouched) and rebuild the tree.

    Returns ``model`` itself when nothing is new. Otherwise inner vectors are
    reset to zero because the tree shape changed.
    """
    counter: Counter[str] = Counter()
    for s in new_corpus:
        counter.update(s)
    fresh = sorted((t for t in counter if t not in model.vocab), key=lambda t: (-counter[t], t))
    if not fresh:
        return model
    counts = [c + counter.get(t, 0) for t, c in zip(model.vocab.tokens, model.vocab.counts)]
    vocab = Vocabulary(model.vocab.tokens + tuple(fresh), tuple(counts) + tuple(counter[t] for t in fresh))
    tree = build_huffman(vocab)
    rng = np.random.default_rng([model.config.seed, len(vocab)])
    inputs = np.vstack([model.input_vectors, _init_inputs(rng, len(fresh), model.dim)])
    return EmbeddingModel(vocab, tree, inputs, np.zeros((tree.inner_count, model.dim)), model.config,
                          list(model.loss_history))


def update_model(model: EmbeddingModel, new_corpus: Iterable[Sequence[str]],
                 config: SkipGramConfig | None = None) -> EmbeddingModel:
    """Continue training on new traces only, extending the vocabulary as needed.

    The input model is not modified.
    """
    new_corpus = [list(s) for s in new_corpus]
    cfg = config or model.config
    grown = extend_vocab(model, new_corpus)
    if grown is model:
        grown = replace(model, input_vectors=model.input_vectors.copy(),
                        inner_vectors=model.inner_vectors.copy(), loss_history=list(model.loss_history))
    centers, targets = _encode(new_corpus, grown.vocab, cfg.window)
    grown.loss_history.extend(_run_epochs(grown, centers, targets, cfg))
    return grown


# --------------------------------------------------------------------------- vector files


@dataclass(frozen=True)
class VectorTable:
    """Read-only token -> vector lookup."""

    tokens: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        m = np.array(self.matrix, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __getitem__(self, token: str) -> np.ndarray:
        return self.matrix[self._index[token]]

    def get(self, token: str, default=None):
        i = self._index.get(token)
        return default if i is None else self.matrix[i]


def save_vectors(model: EmbeddingModel | VectorTable) -> bytes:
    """word2vec text format: ``"<count> <dim>"`` then ``token v1 ... vd`` per line."""
    table = model.vectors() if isinstance(model, EmbeddingModel) else model
    lines = [f"{len(table)} {table.dim}"]
    for tok, row in zip(table.tokens, table.matrix):
        lines.append(tok + " " + " ".join(f"{x:.6f}" for x in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_vectors(data: bytes | str) -> VectorTable:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = data.splitlines()
    if not lines:
        raise FormatError("empty vector file", 1)
    head = lines[0].split()
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise FormatError("header must be '<count> <dim>'", 1)
    count, dim = int(head[0]), int(head[1])
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} vectors, found {len(body)}", len(body) + 2 if len(body) < count else count + 2)
    tokens, rows = [], []
    for lineno, ln in body:
        parts = ln.split()
        if len(parts) != dim + 1:
            raise FormatError(f"expected token and {dim} values, got {len(parts)} fields", lineno)
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise FormatError("non-numeric value", lineno) from None
        tokens.append(parts[0])
    if len(set(tokens)) != len(tokens):
        raise FormatError("duplicate token", 1)
    return VectorTable(tuple(tokens), np.asarray(rows, dtype=np.float64).reshape(count, dim))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
