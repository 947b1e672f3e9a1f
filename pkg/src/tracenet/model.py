"""Siamese convolutional regressor scoring graph-text consistency.

Three channels feed the model: S (node semantic vectors in topological
order), L (word vectors of the graph's activity labels) and T (word vectors of
the process text). L and T share one filter bank; S has its own. Each channel
is convolved at several widths, max-pooled per filter, concatenated, and passed
through two sigmoid fusion layers and a sigmoid output unit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .graph import ProcessGraph, ProcessText, topological_order
from .traces import Projection

log = logging.getLogger(__name__)

SEMANTIC_MODES = ("tracewalk", "deepwalk", "none")
NODE_TOKEN_SCOPES = ("instance", "type")


class EmptyDataset(ValueError):
    pass


class MissingEmbedding(UserWarning):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 100
    filter_widths: tuple[int, ...] = (2, 3, 4)
    n_filters: int = 128
    hidden_units: int = 128
    max_tokens: int = 100
    max_nodes: int = 100
    gamma: float = 0.7
    batch_size: int = 128
    max_epochs: int = 10000
    lr: float = 0.0002
    lr_late: float = 0.0001
    lr_drop_epoch: int = 7000
    patience: int = 200
    val_fraction: float = 0.2
    seed: int = 0
    semantic_mode: str = "tracewalk"
    task_mode: str = "all"
    node_tokens: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "filter_widths", tuple(int(w) for w in self.filter_widths))
        for name in ("embed_dim", "n_filters", "hidden_units", "max_tokens", "max_nodes", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.filter_widths or min(self.filter_widths) < 1:
            raise ValueError("filter widths must be positive")
        if max(self.filter_widths) > min(self.max_tokens, self.max_nodes):
            raise ValueError("filter widths cannot exceed max_tokens or max_nodes")
        if self.n_filters < len(self.filter_widths):
            raise ValueError("need at least one filter per width")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        Projection(self.task_mode)
        if self.node_tokens not in NODE_TOKEN_SCOPES:
            raise ValueError(f"node_tokens must be one of {NODE_TOKEN_SCOPES}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def filters_per_width(self) -> tuple[int, ...]:
        base, extra = divmod(self.n_filters, len(self.filter_widths))
        return tuple(base + (1 if i < extra else 0) for i in range(len(self.filter_widths)))

    def to_json(self) -> dict:
        d = asdict(self)
        d["filter_widths"] = list(self.filter_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- encoding

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def embed_text(tokens: Sequence[str], vectors, max_tokens: int) -> np.ndarray:
    """``max_tokens x dim`` matrix: looked-up rows, zeros for unknown tokens and padding."""
    out = np.zeros((max_tokens, vectors.dim))
    for i, tok in enumerate(tokens[:max_tokens]):
        row = vectors.get(tok)
        if row is not None:
            out[i] = row
    return out


def node_token(graph: ProcessGraph, node_id: str, scope: str = "instance") -> str:
    """Vocabulary key of a node in the semantic embedding.

    ``instance`` keys are ``<graph_id>.<node_id>``; ``type`` keys are shared across
    graphs: the activity label's words joined by ``_``, or ``<kind>_<role>`` for
    gateways.
    """
    if scope == "instance":
        return f"{graph.id}.{node_id}"
    node = graph[node_id]
    if node.is_activity:
        return "_".join(tokenize(node.label)) or node_id
    return f"{node.gateway_kind}_{node.gateway_role}"


@dataclass
class EncodedPair:
    S: np.ndarray
    L: np.ndarray
    T: np.ndarray
    gold: float | None = None


def encode_graph(graph: ProcessGraph, node_vectors, word_vectors, config: ModelConfig,
                 missing: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """S and L channels of a graph.

    Nodes are taken in topological order (ties by id). S keeps the nodes selected
    by ``config.task_mode``; tokens absent from ``node_vectors`` get a zero row and
    are appended to ``missing`` when given.
    """
    order = topological_order(graph)
    S = np.zeros((config.max_nodes, config.embed_dim))
    if config.semantic_mode != "none":
        if node_vectors is None:
            raise ValueError("node vectors are required unless semantic_mode is 'none'")
        kept = [nid for nid in order if _keep(graph[nid], config.task_mode)]
        for i, nid in enumerate(kept[: config.max_nodes]):
            row = node_vectors.get(node_token(graph, nid, config.node_tokens))
            if row is None:
                if missing is not None:
                    missing.append(node_token(graph, nid, config.node_tokens))
                continue
            S[i] = row
    labels = " ".join(graph[nid].label for nid in order if graph[nid].is_activity)
    L = embed_text(tokenize(labels), word_vectors, config.max_tokens)
    return S, L


def _keep(node, task_mode: str) -> bool:
    mode = Projection(task_mode)
    if mode is Projection.ALL:
        return True
    return node.is_activity == (mode is Projection.ACTIVITIES)


def encode_pair(graph: ProcessGraph, text: ProcessText | Sequence[str] | str, node_vectors, word_vectors,
                config: ModelConfig, gold: float | None = None, missing: list | None = None) -> EncodedPair:
    if isinstance(text, ProcessText):
        text = str(text)
    elif not isinstance(text, str):
        text = " ".join(text)
    S, L = encode_graph(graph, node_vectors, word_vectors, config, missing)
    T = embed_text(tokenize(text), word_vectors, config.max_tokens)
    return EncodedPair(S, L, T, gold)


# --------------------------------------------------------------------------- model


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (rows + cols)); trailing axes count as columns."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=shape)


class TraceNetModel:
    """Parameters live in ``self.params``; the L and T channels read the same ``text_w*`` arrays."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(np.random.default_rng(config.seed))

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        c = self.config
        p: dict[str, np.ndarray] = {}
        for prefix in ("text", "sem"):
            for h, nf in zip(c.filter_widths, c.filters_per_width):
                p[f"{prefix}_w{h}"] = glorot(rng, (nf, h, c.embed_dim))
                p[f"{prefix}_b{h}"] = np.zeros(nf)
        p["W1"] = glorot(rng, (c.hidden_units, 3 * c.n_filters))
        p["b1"] = np.zeros(c.hidden_units)
        p["W2"] = glorot(rng, (c.hidden_units, c.hidden_units))
        p["b2"] = np.zeros(c.hidden_units)
        p["Wo"] = glorot(rng, (1, c.hidden_units))
        p["bo"] = np.zeros(1)
        return p

    def filters(self, channel: str) -> list[tuple[np.ndarray, np.ndarray]]:
        """Filter bank used by channel ``"S"``, ``"L"`` or ``"T"``."""
        prefix = "sem" if channel == "S" else "text"
        return [(self.params[f"{prefix}_w{h}"], self.params[f"{prefix}_b{h}"]) for h in self.config.filter_widths]

    def zero_(self) -> "TraceNetModel":
        for arr in self.params.values():
            arr[...] = 0.0
        return self

    def copy(self) -> "TraceNetModel":
        return TraceNetModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward / backward

    def _channel(self, X: np.ndarray, prefix: str):
        pooled, caches = [], []
        for h in self.config.filter_widths:
            maps, ccache = nn.conv1d_forward(X, self.params[f"{prefix}_w{h}"], self.params[f"{prefix}_b{h}"])
            vals, pcache = nn.max_pool_forward(maps)
            pooled.append(vals)
            caches.append((h, ccache, pcache, maps))
        return np.concatenate(pooled, axis=1), caches

    def _channel_backward(self, dpooled: np.ndarray, caches, prefix: str, grads: dict) -> None:
        # only the pooled (argmax) window of each map receives gradient, so gather
        # those windows instead of back-propagating through every position
        start = 0
        for h, ccache, pcache, _maps in caches:
            x, out, weights, _single = ccache
            idx, _shape = pcache
            nf = weights.shape[0]
            dv = dpooled[:, start : start + nf]
            start += nf
            peak = np.take_along_axis(out, idx[..., None], axis=-1)[..., 0]  # (B, F)
            dpre = dv * peak * (1.0 - peak)
            rows = nn.conv_windows(x, h)[np.arange(x.shape[0])[:, None], idx].reshape(*idx.shape, -1)
            grads[f"{prefix}_w{h}"] += np.einsum("bf,bfi->fi", dpre, rows).reshape(weights.shape)
            grads[f"{prefix}_b{h}"] += dpre.sum(axis=0)

    def forward(self, S: np.ndarray, L: np.ndarray, T: np.ndarray, return_cache: bool = False):
        """Scores for a batch (or a single pair when inputs are 2-D)."""
        single = L.ndim == 2
        if single:
            S, L, T = S[None], L[None], T[None]
        c = self.config
        B = L.shape[0]
        if L.shape[1:] != (c.max_tokens, c.embed_dim) or T.shape != L.shape or S.shape != (B, c.max_nodes, c.embed_dim):
            raise nn.ShapeError(f"expected S {(B, c.max_nodes, c.embed_dim)}, L/T {(B, c.max_tokens, c.embed_dim)}; "
                                f"got {S.shape}, {L.shape}, {T.shape}")
        # siamese: L and T go through the same text filters in one stacked pass
        pooled_lt, text_cache = self._channel(np.concatenate([L, T], axis=0), "text")
        pL, pT = pooled_lt[:B], pooled_lt[B:]
        if c.semantic_mode == "none":
            pS, sem_cache = np.zeros((B, c.n_filters)), None
        else:
            pS, sem_cache = self._channel(S, "sem")
        V = np.concatenate([pS, pL, pT], axis=1)
        h1, c1 = nn.dense_forward(V, self.params["W1"], self.params["b1"])
        h2, c2 = nn.dense_forward(h1, self.params["W2"], self.params["b2"])
        out, co = nn.dense_forward(h2, self.params["Wo"], self.params["bo"])
        scores = out[:, 0]
        if single:
            scores = scores[0]
        if return_cache:
            return scores, (text_cache, sem_cache, c1, c2, co, single)
        return scores

    def backward(self, dscores: np.ndarray, cache) -> dict[str, np.ndarray]:
        text_cache, sem_cache, c1, c2, co, single = cache
        dscores = np.atleast_1d(np.asarray(dscores, dtype=np.float64))
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dh2, grads["Wo"], grads["bo"] = nn.dense_backward(dscores[:, None], co)
        dh1, grads["W2"], grads["b2"] = nn.dense_backward(dh2, c2)
        dV, grads["W1"], grads["b1"] = nn.dense_backward(dh1, c1)
        nf = self.config.n_filters
        dS, dL, dT = dV[:, :nf], dV[:, nf : 2 * nf], dV[:, 2 * nf :]
        # both textual branches accumulate into the one shared bank
        self._channel_backward(np.concatenate([dL, dT], axis=0), text_cache, "text", grads)
        if sem_cache is not None:
            self._channel_backward(dS, sem_cache, "sem", grads)
        return grads

    def loss_and_grads(self, S, L, T, gold) -> tuple[float, dict[str, np.ndarray]]:
        scores, cache = self.forward(S, L, T, return_cache=True)
        loss, dscores = nn.quantile_loss(np.atleast_1d(scores), np.atleast_1d(gold), self.config.gamma)
        return loss, self.backward(dscores, cache)

    def pool_margin(self, S, L, T) -> float:
        """Smallest top-2 gap over every pooled map, for picking gradient-check probes."""
        _, (text_cache, sem_cache, *_rest) = self.forward(S, L, T, return_cache=True)
        margins = [nn.pool_margin(maps) for _h, _c, _p, maps in text_cache]
        if sem_cache is not None:
            margins += [nn.pool_margin(maps) for _h, _c, _p, maps in sem_cache]
        return min(margins)

    def predict_encoded(self, pairs: Sequence[EncodedPair], batch_size: int = 256) -> np.ndarray:
        S, L, T, _ = stack(pairs)
        return self.predict_arrays(S, L, T, batch_size)

    def predict_arrays(self, S, L, T, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(L), batch_size):
            out.append(np.atleast_1d(self.forward(S[i : i + batch_size], L[i : i + batch_size], T[i : i + batch_size])))
        return np.concatenate(out) if out else np.zeros(0)


def stack(pairs: Sequence[EncodedPair]):
    S = np.stack([p.S for p in pairs])
    L = np.stack([p.L for p in pairs])
    T = np.stack([p.T for p in pairs])
    y = np.array([np.nan if p.gold is None else p.gold for p in pairs])
    return S, L, T, y


# --------------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: TraceNetModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model: TraceNetModel, dataset: Sequence[EncodedPair], config: ModelConfig | None = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam on the quantile loss with early stopping on a validation split.

    The best-validation parameters are restored at the end. Deterministic for a
    fixed seed.
    """
    cfg = config or model.config
    if len(dataset) == 0:
        raise EmptyDataset("no training pairs")
    S, L, T, y = stack(dataset)
    if np.isnan(y).any():
        raise ValueError("every training pair needs a gold label")
    tr, va = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    if len(va) == 0:
        va = tr
    rng = np.random.default_rng([cfg.seed, 2])
    names = list(model.params)
    state = nn.AdamState.for_params([model.params[k] for k in names])
    history: list[EpochRecord] = []
    best = (np.inf, 0, {k: v.copy() for k, v in model.params.items()})
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_late
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            b = order[i : i + cfg.batch_size]
            loss, grads = model.loss_and_grads(S[b], L[b], T[b], y[b])
            total += loss * len(b)
            nn.adam_step([model.params[k] for k in names], [grads[k] for k in names], state, lr)
        train_loss = total / len(tr)
        val_pred = model.predict_arrays(S[va], L[va], T[va])
        val_loss, _ = nn.quantile_loss(val_pred, y[va], cfg.gamma)
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if on_epoch is not None:
            on_epoch(history[-1])
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.copy() for k, v in model.params.items()})
        elif epoch - best[1] >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
    for k, v in best[2].items():
        model.params[k][...] = v
    return TrainResult(model, history, best[1])


# --------------------------------------------------------------------------- inference


def predict(model: TraceNetModel, graph: ProcessGraph, text, node_vectors, word_vectors) -> float:
    pair = encode_pair(graph, text, node_vectors, word_vectors, model.config)
    return float(model.forward(pair.S, pair.L, pair.T))


def evaluate(model: TraceNetModel, dataset: Sequence[EncodedPair]) -> tuple[float, np.ndarray]:
    """Mean absolute error and per-pair residuals (prediction - gold)."""
    if len(dataset) == 0:
        raise EmptyDataset("nothing to evaluate")
    pred = model.predict_encoded(dataset)
    gold = np.array([p.gold for p in dataset], dtype=np.float64)
    resid = pred - gold
    return float(np.mean(np.abs(resid))), resid


# --------------------------------------------------------------------------- persistence


def table_hash(table) -> str | None:
    if table is None:
        return None
    return hashlib.sha256("\n".join(table.tokens).encode("utf-8")).hexdigest()


def save_model(model: TraceNetModel, path: str | Path, node_vectors=None, word_vectors=None) -> tuple[Path, Path]:
    """Write ``<path>.tnk`` (weights) and ``<path>.json`` (config + vocabulary hashes)."""
    path = Path(path)
    weights = path.with_suffix(".tnk")
    sidecar = path.with_suffix(".json")
    weights.write_bytes(nn.save_checkpoint(model.params))
    meta = {
        "config": model.config.to_json(),
        "vocab_hashes": {"node": table_hash(node_vectors), "word": table_hash(word_vectors)},
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return weights, sidecar


def load_model(path: str | Path) -> tuple[TraceNetModel, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    params = nn.load_checkpoint(path.with_suffix(".tnk").read_bytes())
    model = TraceNetModel(ModelConfig.from_json(meta["config"]), params)
    expected = set(TraceNetModel(model.config).params)
    if set(params) != expected:
        raise ValueError(f"checkpoint parameters {sorted(params)} do not match config")
    return model, meta
