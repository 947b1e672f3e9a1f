"""Finite-difference checks of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .model import ModelConfig, TraceNetModel

TOLERANCE = 1e-4
# probes closer than this to a max-pool tie or a loss kink are redrawn
MIN_MARGIN = 1e-3


@dataclass(frozen=True)
class LayerCheck:
    layer: str
    seed: int
    worst: float
    param: str

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _probe(rng, sample: Callable, margin: Callable):
    for _ in range(100):
        args = sample(rng)
        if margin(*args) > MIN_MARGIN:
            return args
    raise RuntimeError("could not find a probe point away from kinks")


def _check_conv(rng, fault):
    x = rng.normal(size=(2, 7, 3))
    w = rng.normal(size=(4, 3, 3)) * 0.5
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 5))

    def loss():
        return float(np.sum(r * nn.conv1d_forward(x, w, b)[0]))

    _, cache = nn.conv1d_forward(x, w, b)
    dx, dw, db = nn.conv1d_backward(r, cache)
    return {"x": x, "w": w, "b": b}, {"x": dx * fault, "w": dw, "b": db}, loss


def _check_pool(rng, fault):
    maps, r = _probe(rng, lambda g: (g.normal(size=(3, 4, 6)), g.normal(size=(3, 4))),
                     lambda m, _r: nn.pool_margin(m))

    def loss():
        return float(np.sum(r * nn.max_pool_forward(maps)[0]))

    _, cache = nn.max_pool_forward(maps)
    return {"maps": maps}, {"maps": nn.max_pool_backward(r, cache) * fault}, loss


def _dense_check(activation):
    def check(rng, fault):
        x = rng.normal(size=(3, 5))
        W = rng.normal(size=(4, 5)) * 0.5
        b = rng.normal(size=4)
        r = rng.normal(size=(3, 4))

        def loss():
            return float(np.sum(r * nn.dense_forward(x, W, b, activation)[0]))

        _, cache = nn.dense_forward(x, W, b, activation)
        dx, dW, db = nn.dense_backward(r, cache)
        return {"x": x, "W": W, "b": b}, {"x": dx, "W": dW * fault, "b": db}, loss

    return check


def _check_quantile(rng, fault):
    e, y = _probe(rng, lambda g: (g.random(8), g.random(8)), lambda e, y: np.min(np.abs(e - y)))

    def loss():
        return nn.quantile_loss(e, y, 0.7)[0]

    return {"e": e}, {"e": nn.quantile_loss(e, y, 0.7)[1] * fault}, loss


def _model_check(semantic_mode):
    def check(rng, fault):
        cfg = ModelConfig(embed_dim=4, filter_widths=(2, 3), n_filters=6, hidden_units=5, max_tokens=7,
                          max_nodes=6, semantic_mode=semantic_mode, seed=int(rng.integers(1 << 31)))
        model = TraceNetModel(cfg)

        def sample(g):
            return (g.normal(size=(3, 6, 4)), g.normal(size=(3, 7, 4)), g.normal(size=(3, 7, 4)), g.random(3))

        def margin(S, L, T, y):
            e = model.forward(S, L, T)
            return min(model.pool_margin(S, L, T), float(np.min(np.abs(e - y))))

        S, L, T, y = _probe(rng, sample, margin)
        _, grads = model.loss_and_grads(S, L, T, y)
        grads = dict(grads)
        grads["text_w2"] = grads["text_w2"] * fault
        return model.params, grads, lambda: model.loss_and_grads(S, L, T, y)[0]

    return check


LAYERS: dict[str, Callable] = {
    "conv1d": _check_conv,
    "max_pool": _check_pool,
    "dense_sigmoid": _dense_check("sigmoid"),
    "dense_identity": _dense_check("identity"),
    "quantile_loss": _check_quantile,
    "tracenet": _model_check("tracewalk"),
    "tracenet_no_semantic": _model_check("none"),
}


def run_gradchecks(seeds=range(10), fault: bool = False, eps: float = 1e-4) -> list[LayerCheck]:
    """Worst relative error per layer and seed.

    ``fault`` scales one analytic gradient per layer by 1.01 so the report
    must fail.
    """
    scale = 1.01 if fault else 1.0
    out = []
    for k, (name, build) in enumerate(LAYERS.items()):
        for seed in seeds:
            rng = np.random.default_rng([seed, k])
            params, grads, loss = build(rng, scale)
            worst = nn.grad_check(loss, params, grads, eps=eps)
            key = max(worst, key=worst.get)
            out.append(LayerCheck(name, seed, worst[key], key))
    return out


def summarize(checks: list[LayerCheck]) -> dict[str, LayerCheck]:
    """Worst check per layer, in layer order."""
    best: dict[str, LayerCheck] = {}
    for c in checks:
        if c.layer not in best or c.worst > best[c.layer].worst:
            best[c.layer] = c
    return best
