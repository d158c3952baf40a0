"""Reverse-mode differentiation over the numerics primitives.

Usage::

    with Tape() as tape:
        x = tensor([1.0, 2.0], requires_grad=True)
        loss = sum_(square(x))
    grads = backward(tape, loss)
    grads[x]   # Tensor([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    ctx: dict


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives execute, so inputs always precede the
    nodes that consume them. The tape keeps every recorded tensor alive.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.paused = False

    def record(self, op, inputs, out, ctx):
        self.nodes.append(Node(op, inputs, out, ctx))

    def __enter__(self):
        nx._tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = nx._tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen, out = set(), []
        for n in self.nodes:
            for t in n.inputs:
                if t is not None and t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# Each rule maps (node, upstream grad) to a tuple of input grads (None to skip).

def _vjp_add(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), None if b is None else _unbroadcast(g, b.shape)


def _vjp_sub(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), None if b is None else _unbroadcast(-g, b.shape)


def _vjp_mul(n, g):
    a, b = n.inputs
    ga = gb = None
    if b is None:
        c = n.ctx["const"]
        return _unbroadcast(g * c, a.shape), None
    if a.requires_grad:
        ga = _unbroadcast(g * b.data, a.shape)
    if b.requires_grad:
        gb = _unbroadcast(g * a.data, b.shape)
    return ga, gb


def _vjp_div(n, g):
    a, b = n.inputs
    if b is None:
        c = n.ctx["const"]
        return _unbroadcast(g / c, a.shape), None
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(g / b.data, a.shape)
    if b.requires_grad:
        gb = _unbroadcast(-g * n.out.data / b.data, b.shape)
    return ga, gb


def _vjp_neg(n, g):
    return (-g,)


def _vjp_exp(n, g):
    return (g * n.out.data,)


def _vjp_square(n, g):
    return (2.0 * g * n.inputs[0].data,)


def _vjp_pow_int(n, g):
    k = n.ctx["n"]
    x = n.inputs[0].data
    if k == 0:
        return (np.zeros_like(x),)
    return (g * k * nx.ipow(x, k - 1),)


def _vjp_sqrt(n, g):
    return (g * 0.5 / n.out.data,)


def _vjp_tanh(n, g):
    y = n.out.data
    return (g * (1.0 - y * y),)


def _vjp_cumsum(n, g):
    ax = n.ctx["axis"]
    # adjoint of a prefix sum is the suffix sum
    return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)


def _expand_reduced(g, n):
    if not n.ctx["keepdims"]:
        g = np.expand_dims(g, n.ctx["axes"])
    return g


def _vjp_sum(n, g):
    x = n.inputs[0].data
    return (np.broadcast_to(_expand_reduced(g, n), x.shape).copy(),)


def _vjp_mean(n, g):
    x = n.inputs[0].data
    count = 1
    for ax in n.ctx["axes"]:
        count *= x.shape[ax]
    return (np.broadcast_to(_expand_reduced(g, n) / count, x.shape).copy(),)


def _vjp_max(n, g):
    x = n.inputs[0].data
    m = _expand_reduced(n.out.data, n)
    hit = (x == m).astype(x.dtype)
    hit /= hit.sum(axis=n.ctx["axes"], keepdims=True)
    return (hit * _expand_reduced(g, n),)


def _vjp_matmul(n, g):
    a, b = n.inputs
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def _vjp_softmax(n, g):
    y = n.out.data
    ax = n.ctx["axis"]
    return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)


def _vjp_log_softmax(n, g):
    y = n.out.data
    ax = n.ctx["axis"]
    return (g - np.exp(y) * np.sum(g, axis=ax, keepdims=True),)


def _vjp_reshape(n, g):
    return (g.reshape(n.ctx["shape"]),)


def _vjp_transpose(n, g):
    return (np.transpose(g, np.argsort(n.ctx["axes"])),)


def _vjp_getitem(n, g):
    x = n.inputs[0].data
    out = np.zeros_like(x)
    np.add.at(out, n.ctx["idx"], g)
    return (out,)


def _vjp_stack(n, g):
    ax = n.ctx["axis"]
    index = [slice(None)] * g.ndim
    out = []
    for i in range(len(n.inputs)):
        index[ax] = i
        out.append(g[tuple(index)])
    return tuple(out)


VJP: dict[str, Callable] = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "div": _vjp_div,
    "neg": _vjp_neg, "exp": _vjp_exp, "square": _vjp_square, "pow_int": _vjp_pow_int,
    "sqrt": _vjp_sqrt, "tanh": _vjp_tanh, "cumsum": _vjp_cumsum,
    "sum": _vjp_sum, "mean": _vjp_mean, "max": _vjp_max, "matmul": _vjp_matmul,
    "softmax": _vjp_softmax, "log_softmax": _vjp_log_softmax,
    "reshape": _vjp_reshape, "transpose": _vjp_transpose,
    "getitem": _vjp_getitem, "stack": _vjp_stack,
}


class Gradients(dict):
    """Mapping leaf Tensor -> gradient Tensor (keys compare by identity)."""

    def __missing__(self, leaf: Tensor) -> Tensor:
        # leaves the loss never reached
        return Tensor(np.zeros(leaf.shape, dtype=leaf.dtype))


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Propagate d(loss) back through ``tape``.

    Returns gradients for every leaf that requires grad (or for ``wrt``).
    The tape is left untouched, so repeated calls give identical results.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    leaves = list(wrt) if wrt is not None else tape.leaves()
    leaf_ids = {id(t) for t in leaves}
    was_paused = tape.paused
    tape.paused = True
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None) if id(node.out) not in leaf_ids else grads.get(id(node.out))
            if g is None:
                continue
            in_grads = VJP[node.op](node, g.data)
            for t, gi in zip(node.inputs, in_grads):
                if t is None or gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                gi = np.asarray(gi, dtype=t.dtype)
                grads[id(t)] = Tensor(gi if prev is None else prev.data + gi)
    finally:
        tape.paused = was_paused
    result = Gradients()
    for t in leaves:
        if id(t) in grads:
            result[t] = grads[id(t)]
    return result


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data, dtype=np.float64)
    out = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at perturbed element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)


def _scalar(y) -> float:
    if isinstance(y, Tensor):
        if y.data.size != 1:
            raise ValueError(f"function must return a scalar, got shape {y.shape}")
        return float(y.data.reshape(()))
    return float(y)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_function(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray],
                   h: float = 1e-5) -> list[GradCheckReport]:
    """Compare tape gradients of scalar ``fn(**inputs)`` with central differences."""
    tensors = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
               for k, v in inputs.items()}
    with Tape() as tape:
        loss = fn(**tensors)
    grads = backward(tape, loss, wrt=tensors.values())
    reports = []
    for name, t in tensors.items():
        def f(x, name=name):
            args = {k: (x if k == name else Tensor(v.data)) for k, v in tensors.items()}
            return fn(**args)
        numeric = finite_diff_grad(f, t, h)
        err = rel_error(grads[t].data, numeric.data)
        reports.append(GradCheckReport(name, float(err.max()), int(err.size)))
    return reports


def grad_check(kernel: str, shape: tuple[int, int, int], seed: int = 0, *,
               order: int = 2, causal: bool = False, heads: int = 2) -> list[GradCheckReport]:
    """Gradient-check an attention kernel on q, k, v drawn from [-1, 1].

    ``kernel`` is one of ``ea_full``, ``ea_series`` or ``sa``; ``shape`` is
    (B, L, D). The scalar loss is a fixed random projection of the output.
    """
    from . import kernels

    rng = nx.Rng(seed)
    g = rng.generator
    q, k, v = (g.uniform(-1.0, 1.0, size=shape) for _ in range(3))
    proj = Tensor(g.uniform(-1.0, 1.0, size=shape))

    if kernel == "ea_full":
        def attn(q, k, v):
            return kernels.ea_full_forward(q, k, v, causal=causal)
    elif kernel == "ea_series":
        cfg = kernels.EaConfig(order=order, causal=causal)

        def attn(q, k, v):
            return kernels.ea_series_forward(q, k, v, cfg)
    elif kernel == "sa":
        def attn(q, k, v):
            return kernels.sa_forward(q, k, v, heads=heads, causal=causal)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    def loss(q, k, v):
        return nx.sum_(nx.mul(attn(q, k, v), proj))

    return check_function(loss, {"q": q, "k": k, "v": v})
