"""Small dense-layer toolkit with hand-written backward passes.

Everything is float64 numpy. Layers are pairs of ``*_forward`` returning
``(output, cache)`` and ``*_backward`` taking the upstream gradient and cache.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class EmptyMap(ValueError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def sigmoid(x):
    # tanh form keeps large |x| finite without branches
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# --------------------------------------------------------------------------- convolution


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Valid convolution + sigmoid over token-vector sequences.

    ``x`` is ``(n, k)`` or ``(B, n, k)``; ``weights`` is ``(F, h, k)``. Returns maps
    of shape ``(F, n-h+1)`` or ``(B, F, n-h+1)`` with
    ``map[f, j] = sigmoid(sum(weights[f] * x[j:j+h]) + bias[f])``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    nf, h, k = weights.shape
    B, n, _ = x.shape
    if x.shape[2] != k:
        raise ShapeError(f"input width {x.shape[2]} != filter width {k}")
    if n < h:
        raise ShapeError(f"sequence length {n} shorter than filter height {h}")
    P = n - h + 1
    flat = x.reshape(B * n, k)
    pre = np.broadcast_to(bias, (B, P, nf)).copy()
    # one matmul per filter row, shifted: pre[:, j] += x[:, j + i] @ w[:, i].T
    for i in range(h):
        pre += (flat @ weights[:, i, :].T).reshape(B, n, nf)[:, i : i + P]
    out = sigmoid(pre).transpose(0, 2, 1)
    cache = (x, out, weights, single)
    return (out[0] if single else out), cache


def conv_windows(x: np.ndarray, h: int) -> np.ndarray:
    """Read-only view ``(B, P, h, k)`` of every length-``h`` window of ``x``."""
    return sliding_window_view(x, h, axis=1).transpose(0, 1, 3, 2)


def conv1d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dweights, dbias)``; ``dx`` is None when ``need_dx`` is false."""
    x, out, weights, single = cache
    if single:
        dout = dout[None]
    nf, h, k = weights.shape
    B, n, _ = x.shape
    P = n - h + 1
    dpre = (dout * out * (1.0 - out)).transpose(0, 2, 1)  # (B, P, F)
    flat = np.ascontiguousarray(dpre).reshape(-1, nf)
    dw = np.empty_like(weights)
    for i in range(h):
        dw[:, i, :] = flat.T @ x[:, i : i + P, :].reshape(-1, k)
    db = flat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dx = np.zeros_like(x)
    for i in range(h):
        dx[:, i : i + P, :] += dpre @ weights[:, i, :]
    return (dx[0] if single else dx), dw, db


def conv1d(x, filters, activation: str = "sigmoid"):
    """Feature maps for a list of ``(weights (h, k), bias)`` filters, one map each."""
    if activation != "sigmoid":
        raise ValueError("only sigmoid feature maps are supported")
    maps = []
    for w, b in filters:
        w = np.asarray(w, dtype=np.float64)
        m, _ = conv1d_forward(x, w[None], np.asarray([b], dtype=np.float64))
        maps.append(m[0])
    return maps


# --------------------------------------------------------------------------- pooling


def max_pool(v) -> tuple[float, int]:
    """Largest entry and its index; ties go to the first occurrence."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyMap("cannot pool an empty feature map")
    i = int(np.argmax(v))
    return float(v[i]), i


def max_pool_forward(maps: np.ndarray):
    """Pool the last axis; ``np.argmax`` returns the first index on ties."""
    if maps.shape[-1] == 0:
        raise EmptyMap("cannot pool an empty feature map")
    idx = np.argmax(maps, axis=-1)
    vals = np.take_along_axis(maps, idx[..., None], axis=-1)[..., 0]
    return vals, (idx, maps.shape)


def max_pool_backward(dvals: np.ndarray, cache) -> np.ndarray:
    idx, shape = cache
    dmaps = np.zeros(shape)
    np.put_along_axis(dmaps, idx[..., None], dvals[..., None], axis=-1)
    return dmaps


def pool_margin(maps: np.ndarray) -> float:
    """Smallest gap between the best and second-best entry of any map."""
    if maps.shape[-1] < 2:
        return np.inf
    top2 = np.sort(maps, axis=-1)[..., -2:]
    return float(np.min(top2[..., 1] - top2[..., 0]))


# --------------------------------------------------------------------------- dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, activation: str = "sigmoid"):
    """``activation(x @ W.T + b)`` for ``x`` of shape ``(in,)`` or ``(B, in)``; ``W`` is ``(out, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, W {W.shape}, b {b.shape}")
    pre = x @ W.T + b
    if activation == "sigmoid":
        y = sigmoid(pre)
    elif activation == "identity":
        y = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, y, W, activation)


def dense_backward(dy: np.ndarray, cache):
    """Returns ``(dx, dW, db)``."""
    x, y, W, activation = cache
    dpre = dy * y * (1.0 - y) if activation == "sigmoid" else dy
    if x.ndim == 1:
        return W.T @ dpre, np.outer(dpre, x), dpre.copy()
    return dpre @ W, dpre.T @ x, dpre.sum(axis=0)


def dense(x, W: Parameter | np.ndarray, b: Parameter | np.ndarray, activation: str = "sigmoid") -> np.ndarray:
    W = W.value if isinstance(W, Parameter) else np.asarray(W, dtype=np.float64)
    b = b.value if isinstance(b, Parameter) else np.asarray(b, dtype=np.float64)
    return dense_forward(x, W, b, activation)[0]


def softmax(o) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    z = np.exp(o - o.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------- loss


def quantile_loss(e, y, gamma: float) -> tuple[float, np.ndarray]:
    """Asymmetric absolute error: weight ``gamma`` where e <= y, ``1 - gamma`` above.

    Returns the mean loss and its gradient w.r.t. ``e``; the subgradient at
    e == y is taken as 0.
    """
    e = np.asarray(e, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if e.shape != y.shape or e.ndim != 1 or e.size == 0:
        raise ShapeError(f"quantile_loss: shapes {e.shape} and {y.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    m = e.size
    d = e - y
    w = np.where(d <= 0, gamma, 1.0 - gamma)
    loss = float(np.sum(w * np.abs(d)) / m)
    grad = np.where(d < 0, -gamma, np.where(d > 0, 1.0 - gamma, 0.0)) / m
    return loss, grad


def mean_absolute_error(e, y) -> float:
    e = np.asarray(e, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.abs(e - y)) / e.size)


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(_value(p)) for p in params], [np.zeros_like(_value(p)) for p in params])


def _value(p):
    return p.value if isinstance(p, Parameter) else p


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Returns ``params``."""
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [np.zeros_like(_value(p)) for p in params]
        state.v = [np.zeros_like(_value(p)) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("params, grads and Adam state disagree in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        val = _value(p)
        if g.shape != val.shape:
            raise ShapeError(f"grad {g.shape} vs param {val.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        val -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------- gradient checking


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               eps: float = 1e-4, max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Central differences against analytic gradients.

    ``params`` maps names to arrays that ``loss_fn`` reads (they are perturbed in
    place and restored). ``grads`` holds the analytic gradients. With
    ``max_entries`` only a random subset of each array is probed. Returns the
    worst relative error per name.
    """
    worst = {}
    for name, arr in params.items():
        g = np.asarray(grads[name])
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn()
            flat[i] = old - eps
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            errs.append(float(relative_error(g.reshape(-1)[i], num)))
        worst[name] = max(errs) if errs else 0.0
    return worst


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"TNK1"


def save_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    """``TNK1`` then per parameter: name length, name, rank, dims, little-endian f64 data."""
    out = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a TNK1 checkpoint")
    pos = 4
    out = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise ValueError(f"truncated payload for {name}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
            out[name] = arr
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    return out
