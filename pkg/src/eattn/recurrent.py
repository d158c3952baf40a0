"""Token-by-token inference engines.

``ea_recurrent_step`` advances fixed-size caches (s, z) of shape D x (order+1);
``sa_kv_step`` appends to a preallocated key/value cache and attends over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .kernels import EaConfig, default_epsilon, power_ladder, taylor_coeffs
from .numerics import Tensor


@dataclass(frozen=True)
class RecurrentState:
    s: Tensor
    z: Tensor
    step: int
    coeffs: Tensor
    epsilon: float

    @classmethod
    def new(cls, d: int, order: int, precision: str = "f64",
            epsilon: float | None = None) -> "RecurrentState":
        dtype = nx.dtype_of(precision)
        coeffs = Tensor(taylor_coeffs(order).astype(dtype))
        shape = (d, order + 1)
        eps = default_epsilon(dtype) if epsilon is None else epsilon
        return cls(nx.zeros(shape, precision), nx.zeros(shape, precision), 0, coeffs, eps)

    @classmethod
    def for_config(cls, d: int, cfg: EaConfig, precision: str = "f64") -> "RecurrentState":
        return cls.new(d, cfg.order, precision, cfg.epsilon)

    @property
    def order(self) -> int:
        return self.s.shape[1] - 1

    @property
    def d(self) -> int:
        return self.s.shape[0]


def ea_recurrent_step(state: RecurrentState, q: Tensor, k: Tensor, v: Tensor
                      ) -> tuple[Tensor, RecurrentState]:
    """One causal EA-series step; returns (y_i, next state). O((order+1) D)."""
    d = state.d
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.shape != (d,):
            raise nx.ShapeError(f"{name} has shape {t.shape}, state expects ({d},)")
    ek = nx.exp(nx.neg(nx.square(k)))
    kw = nx.mul(power_ladder(k, state.order, axis=-1), nx.reshape(ek, (d, 1)))
    kwv = nx.mul(kw, nx.reshape(v, (d, 1)))
    s = nx.add(state.s, kwv)
    z = nx.add(state.z, kw)
    qc = nx.mul(power_ladder(q, state.order, axis=-1), state.coeffs)
    num = nx.sum_(nx.mul(qc, s), axis=-1)
    den = nx.add(nx.sum_(nx.mul(qc, z), axis=-1), state.epsilon)
    return nx.div(num, den), replace(state, s=s, z=z, step=state.step + 1)


class KvCache:
    """Preallocated key/value store for softmax-attention decoding.

    The backing buffers are written in place as tokens arrive; rows at or
    beyond ``len`` are never read.
    """

    def __init__(self, l_max: int, d: int, precision: str = "f64"):
        self.l_max = int(l_max)
        self.d = int(d)
        self.stored_k = nx.zeros((self.l_max, self.d), precision)
        self.stored_v = nx.zeros((self.l_max, self.d), precision)
        self.len = 0

    @property
    def precision(self) -> str:
        return self.stored_k.precision


def sa_kv_step(cache: KvCache, q: Tensor, k: Tensor, v: Tensor, heads: int,
               scale: bool = True) -> tuple[Tensor, KvCache]:
    """Append (k, v) and attend the single query over all cached rows."""
    d = cache.d
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.shape != (d,):
            raise nx.ShapeError(f"{name} has shape {t.shape}, cache expects ({d},)")
    if cache.len >= cache.l_max:
        raise OverflowError(f"KV cache full ({cache.l_max} tokens)")
    if d % heads:
        raise ValueError(f"D={d} is not divisible by heads={heads}")
    cache.stored_k.data[cache.len] = k.data
    cache.stored_v.data[cache.len] = v.data
    cache.len += 1
    n, dh = cache.len, d // heads
    keys = Tensor(cache.stored_k.data[:n].reshape(n, heads, dh).transpose(1, 2, 0))
    vals = Tensor(cache.stored_v.data[:n].reshape(n, heads, dh).transpose(1, 0, 2))
    qh = nx.reshape(q, (heads, 1, dh))
    scores = nx.matmul(qh, keys)
    if scale:
        scores = nx.mul(scores, 1.0 / math.sqrt(dh))
    w = nx.softmax(scores, axis=-1)
    y = nx.reshape(nx.matmul(w, vals), (d,))
    return y, cache


def state_size_bytes(state) -> int:
    """Payload bytes of a RecurrentState's caches or a KvCache's occupied rows."""
    if isinstance(state, RecurrentState):
        return state.s.nbytes + state.z.nbytes
    if isinstance(state, KvCache):
        itemsize = state.stored_k.data.itemsize
        return 2 * state.len * state.d * itemsize
    raise TypeError(f"no cache size for {type(state).__name__}")


def stream_ea(q: Tensor, k: Tensor, v: Tensor, cfg: EaConfig) -> Tensor:
    """Run the recurrent engine over an (L, D) sequence; returns (L, D)."""
    L, d = q.shape
    state = RecurrentState.for_config(d, cfg, q.precision)
    ys = []
    for i in range(L):
        y, state = ea_recurrent_step(state, Tensor(q.data[i]), Tensor(k.data[i]), Tensor(v.data[i]))
        ys.append(y.data)
    return Tensor(np.stack(ys))


def stream_sa(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    L, d = q.shape
    cache = KvCache(L, d, q.precision)
    ys = []
    for i in range(L):
        y, cache = sa_kv_step(cache, Tensor(q.data[i]), Tensor(k.data[i]), Tensor(v.data[i]), heads)
        ys.append(y.data)
    return Tensor(np.stack(ys))
