"""Minimal dense-tensor computation graph with reverse-mode differentiation.

Every model formula in this repo is assembled from the ops below. Design
constraints that the tests lean on:

* all values are float64 (gradient-check tolerances drive the test strategy);
* the graph is define-by-run: calling an op evaluates it eagerly and records
  the node, `backward(root)` replays the tape in reverse topological order;
* broadcasting is restricted to bias-add over the last axis (and division by
  a one-element tensor); every other op demands exact shapes so that shape
  bugs fail loudly at the offending node;
* softmax / log-softmax / logsumexp subtract the row max before exponentiating.

A graph and its tensors are confined to one thread during forward/backward;
independent graphs may run concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op's inputs do not fit together; names the op."""


class Tensor:
    """A float64 array plus the autodiff bookkeeping for one graph node."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bw", "name")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), bw: Callable | None = None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._bw = bw
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
          bw: Callable | None) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op, parents=parents, bw=bw if rg else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Fan-out accumulates additively.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _shape_fail(op: str, *ts: Tensor):
    shapes = ", ".join(str(t.data.shape) for t in ts)
    raise ShapeError(f"{op}: incompatible input shapes {shapes}")


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the DAG under `root` (iterative, visits each node once)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from `root`.

    The root must hold exactly one element (a scalar loss)."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    order = topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2d@2d, 1d@2d and 2d@1d matrix products."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]:
        out = ad @ bd

        def bw(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
    elif ad.ndim == 1 and bd.ndim == 2 and ad.shape[0] == bd.shape[0]:
        out = ad @ bd

        def bw(g):
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        out = ad @ bd

        def bw(g):
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
    else:
        _shape_fail("matmul", a, b)
    return _node("matmul", out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may be a vector bias added over the last axis."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    else:
        _shape_fail("add", a, b)
    return _node("add", ad + bd, (a, b), bw)


def add_n(ts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors in one node."""
    if not ts:
        raise ShapeError("add_n: empty input list")
    shape = ts[0].data.shape
    for t in ts:
        if t.data.shape != shape:
            _shape_fail("add_n", *ts)
    out = np.zeros(shape)
    for t in ts:
        out += t.data

    def bw(g):
        for t in ts:
            _accum(t, g)

    return _node("add_n", out, tuple(ts), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        _shape_fail("sub", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, exact same shapes."""
    if a.data.shape != b.data.shape:
        _shape_fail("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _node("mul", ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; `b` may also be a one-element tensor."""
    ad, bd = a.data, b.data
    if not (ad.shape == bd.shape or bd.size == 1):
        _shape_fail("div", a, b)
    out = ad / bd

    def bw(g):
        _accum(a, np.broadcast_to(g / bd, ad.shape).copy() if bd.size == 1 else g / bd)
        gb = -g * ad / (bd * bd)
        _accum(b, gb.sum().reshape(bd.shape) if bd.size == 1 and ad.shape != bd.shape else gb)

    return _node("div", out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. `s`)."""
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _node("scale", a.data * s, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _node("tanh", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _node("sigmoid", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _node("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, g / ad)

    return _node("log", np.log(ad), (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis (max subtracted first)."""
    out = softmax_np(a.data)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _node("softmax", out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    ad = a.data
    m = ad.max(axis=-1, keepdims=True)
    z = ad - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _node("log_softmax", out, (a,), bw)


def logsumexp(a: Tensor) -> Tensor:
    """Reduce the last axis: log(sum(exp(x)))."""
    ad = a.data
    m = ad.max(axis=-1, keepdims=True)
    out = (m + np.log(np.exp(ad - m).sum(axis=-1, keepdims=True))).squeeze(-1)

    def bw(g):
        soft = np.exp(ad - np.expand_dims(out, -1))
        _accum(a, soft * np.expand_dims(g, -1))

    return _node("logsumexp", out, (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; all other dims must agree."""
    ts = tuple(ts)
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        _shape_fail("concat", *ts)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node("concat", out, ts, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    ad = a.data
    if not (0 <= start and start + length <= ad.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {ad.shape}")
    sl = [slice(None)] * ad.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(ad)
            a.grad[sl] += g

    return _node("narrow", ad[sl].copy(), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    ad = a.data
    out = ad.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(ad.shape))

    return _node("reshape", out, (a,), bw)


def conv1d_same(x: Tensor, w: Tensor) -> Tensor:
    """1-d convolution over time with same padding.

    x: (T, Cin), w: (K, Cin, Cout) with K odd -> (T, Cout)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 3 or xd.shape[1] != wd.shape[1] or wd.shape[0] % 2 != 1:
        _shape_fail("conv1d_same", x, w)
    T, cin = xd.shape
    K, _, cout = wd.shape
    pad = K // 2
    xp = np.pad(xd, ((pad, pad), (0, 0)))
    # windows[t, k, c] = xp[t + k, c]
    cols = np.stack([xp[k:k + T] for k in range(K)], axis=1).reshape(T, K * cin)
    wmat = wd.reshape(K * cin, cout)
    out = cols @ wmat

    def bw(g):
        _accum(w, (cols.T @ g).reshape(K, cin, cout))
        if x.requires_grad:
            dcols = (g @ wmat.T).reshape(T, K, cin)
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[k:k + T] += dcols[:, k, :]
            _accum(x, dxp[pad:pad + T])

    return _node("conv1d_same", out, (x, w), bw)


def maxpool2_time(x: Tensor) -> Tensor:
    """Max-pool over time with width 2, stride 2, ceil mode: (T, C) -> (ceil(T/2), C)."""
    xd = x.data
    if xd.ndim != 2:
        _shape_fail("maxpool2_time", x)
    T, C = xd.shape
    To = (T + 1) // 2
    xp = xd if T % 2 == 0 else np.concatenate([xd, np.full((1, C), -np.inf)])
    pairs = xp.reshape(To, 2, C)
    idx = pairs.argmax(axis=1)
    out = np.take_along_axis(pairs, idx[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        dxp = np.zeros((To, 2, C))
        np.put_along_axis(dxp, idx[:, None, :], g[:, None, :], axis=1)
        _accum(x, dxp.reshape(To * 2, C)[:T])

    return _node("maxpool2_time", out, (x,), bw)


def sum_all(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, np.full_like(ad, float(g)))

    return _node("sum_all", np.asarray(ad.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    ad = a.data
    n = ad.size

    def bw(g):
        _accum(a, np.full_like(ad, float(g) / n))

    return _node("mean_all", np.asarray(ad.mean()), (a,), bw)


# ---------------------------------------------------------------------------
# numpy-level numeric helpers (shared by the graph ops and the DP code)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def lse_np(x: np.ndarray, axis=-1) -> np.ndarray:
    """log-sum-exp that tolerates -inf entries (all -inf reduces to -inf)."""
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    s = np.where(np.isfinite(m), s, m)
    return np.squeeze(s, axis=axis)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor],
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` rebuilds the scalar loss from the current contents of `params`;
    the relative error per coordinate is |a - n| / max(1, |a|, |n|).
    Non-finite values anywhere are reported as an error, never dropped.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"grad_check: epsilon {epsilon} outside (0, 1e-2]")
    params = list(params)
    for p in params:
        p.zero_grad()
    root = fn()
    if root.size != 1:
        raise ShapeError("grad_check: fn must return a scalar tensor")
    backward(root)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = fn().item()
            flat[i] = orig - epsilon
            lo = fn().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * epsilon)
            ana = gflat[i]
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise ValueError(
                    f"grad_check: non-finite value at coordinate {i} of {p!r} "
                    f"(analytic={ana}, numeric={num})")
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
