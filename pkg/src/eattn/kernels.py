"""Attention kernels over (q, k, v) tensors of shape (..., L, D).

* ``ea_full_forward``: element-wise attention with per-channel weights
  softmax_j(-(q_ic - k_jc)^2), O(L^2 D).
* ``ea_series_forward``: the same ratio with exp(2 q k) replaced by an even
  order Taylor polynomial, which factorises so the j-sum becomes a plain sum
  (non-causal) or a prefix sum (causal); O(t L D).
* ``sa_forward``: multi-head scaled dot-product softmax attention baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

EPS_F64 = 1e-12
EPS_F32 = 1e-6
MAX_ORDER = 20


class ConfigError(ValueError):
    pass


def taylor_coeffs(order: int) -> np.ndarray:
    """Coefficients 2^n / n! for n = 0..order of the expansion of exp(2x)."""
    if int(order) != order or order < 2 or order % 2:
        raise ConfigError(
            f"Taylor order must be an even integer >= 2 (odd-degree truncations of exp "
            f"go negative, so the attention weights would lose positivity); got {order}")
    if order > MAX_ORDER:
        raise ConfigError(f"Taylor order must be <= {MAX_ORDER}; got {order}")
    c = np.empty(int(order) + 1)
    c[0] = 1.0
    for n in range(1, len(c)):
        c[n] = c[n - 1] * 2.0 / n
    return c


def default_epsilon(dtype) -> float:
    return EPS_F32 if np.dtype(dtype) == np.float32 else EPS_F64


@dataclass(frozen=True)
class EaConfig:
    order: int = 2
    causal: bool = False
    epsilon: float | None = None  # None: precision default

    def __post_init__(self):
        taylor_coeffs(self.order)
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

    def eps_for(self, dtype) -> float:
        return default_epsilon(dtype) if self.epsilon is None else self.epsilon

    @property
    def coeffs(self) -> np.ndarray:
        return taylor_coeffs(self.order)


@dataclass
class AttnBatch:
    """q, k, v of identical shape (B, L, D)."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise nx.ShapeError(
                f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        for name in ("q", "k", "v"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def random(cls, rng: nx.Rng, shape, low=-1.0, high=1.0, precision="f64") -> "AttnBatch":
        return cls(*(rng.uniform(shape, low, high, precision) for _ in range(3)))


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if not (q.shape == k.shape == v.shape):
        raise nx.ShapeError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2:
        raise nx.ShapeError(f"expected (..., L, D) inputs, got {q.shape}")


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def ea_full_forward(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Exact element-wise attention; materialises an (..., L, L, D) score tensor."""
    _check_qkv(q, k, v)
    *lead, L, D = q.shape
    qi = nx.reshape(q, (*lead, L, 1, D))
    kj = nx.reshape(k, (*lead, 1, L, D))
    scores = nx.neg(nx.square(nx.sub(qi, kj)))
    mask = causal_mask(L)[:, :, None] if causal else None
    w = nx.softmax(scores, axis=-2, mask=mask)
    vj = nx.reshape(v, (*lead, 1, L, D))
    return nx.sum_(nx.mul(w, vj), axis=-2)


def power_ladder(x: Tensor, order: int, axis: int = 0) -> Tensor:
    """Stack (1, x, x^2, ..., x^order) on a new axis by repeated products."""
    terms = [Tensor(np.ones(x.shape, dtype=x.dtype)), x]
    p = x
    for _ in range(2, order + 1):
        p = nx.mul(p, x)
        terms.append(p)
    return nx.stack(terms, axis=axis)


def _term_coeffs(cfg: EaConfig, x: Tensor) -> Tensor:
    c = cfg.coeffs.astype(x.dtype)
    return Tensor(c.reshape((len(c),) + (1,) * x.ndim))


def ea_series_forward(q: Tensor, k: Tensor, v: Tensor, cfg: EaConfig) -> Tensor:
    """Taylor-series element-wise attention (causal when ``cfg.causal``).

    The polynomial term axis (length order+1) is materialised as a leading
    axis and broadcast against the (L, D) grid; the sequence sum becomes a
    cumulative sum in the causal case.
    """
    _check_qkv(q, k, v)
    ek = nx.exp(nx.neg(nx.square(k)))
    kw = nx.mul(power_ladder(k, cfg.order), ek)
    kwv = nx.mul(kw, v)
    if cfg.causal:
        num_acc = nx.cumsum(kwv, axis=-2)
        den_acc = nx.cumsum(kw, axis=-2)
    else:
        num_acc = nx.sum_(kwv, axis=-2, keepdims=True)
        den_acc = nx.sum_(kw, axis=-2, keepdims=True)
    qc = nx.mul(power_ladder(q, cfg.order), _term_coeffs(cfg, q))
    num = nx.sum_(nx.mul(qc, num_acc), axis=0)
    den = nx.add(nx.sum_(nx.mul(qc, den_acc), axis=0), cfg.eps_for(q.dtype))
    return nx.div(num, den)


def series_denominator(q: Tensor, k: Tensor, cfg: EaConfig) -> np.ndarray:
    """Denominator of ``ea_series_forward`` before the epsilon guard."""
    qp = power_ladder(q, cfg.order).data * _term_coeffs(cfg, q).data
    kp = power_ladder(k, cfg.order).data * np.exp(-k.data * k.data)
    acc = np.cumsum(kp, axis=-2) if cfg.causal else kp.sum(axis=-2, keepdims=True)
    return np.sum(qp * acc, axis=0)


def sa_forward(q: Tensor, k: Tensor, v: Tensor, heads: int, causal: bool = False,
               scale: bool = True) -> Tensor:
    """Multi-head softmax attention with 1/sqrt(D/H) scaling."""
    _check_qkv(q, k, v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (nx.reshape(t, (1, *t.shape)) for t in (q, k, v))
    if q.ndim != 3:
        raise nx.ShapeError(f"sa_forward expects (B, L, D) or (L, D), got {q.shape}")
    B, L, D = q.shape
    if heads < 1 or D % heads:
        raise ConfigError(f"D={D} is not divisible by heads={heads}")
    dh = D // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = nx.matmul(qh, nx.transpose(kh, (0, 1, 3, 2)))
    if scale:
        scores = nx.mul(scores, 1.0 / math.sqrt(dh))
    w = nx.softmax(scores, axis=-1, mask=causal_mask(L) if causal else None)
    out = nx.matmul(w, vh)
    y = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, L, D))
    return nx.reshape(y, (L, D)) if squeeze else y


def series_approx_error(order: int, x) -> np.ndarray:
    """|e^x - sum_{n<=order} x^n/n!| on a grid (error of the plain exponential series)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("grid must be finite")
    poly = np.zeros_like(x)
    term = np.ones_like(x)
    for n in range(order + 1):
        if n:
            term = term * x / n
        poly = poly + term
    return np.abs(np.exp(x) - poly)


def parse_attention(name: str) -> tuple[str, int | None]:
    """Map a CLI-style kernel id (``ea_full``, ``ea2``, ``ea6``, ``sa``) to (kind, order)."""
    name = name.strip().lower()
    if name in ("ea_full", "sa"):
        return name, None
    if name.startswith("ea_series"):
        name = "ea" + name[len("ea_series"):].lstrip("_(").rstrip(")")
    if name.startswith("ea") and name[2:].isdigit():
        order = int(name[2:])
        taylor_coeffs(order)
        return "ea_series", order
    raise ConfigError(f"unknown attention kind {name!r}; expected ea_full, ea<N>, or sa")


def attention(kind: str, q: Tensor, k: Tensor, v: Tensor, *, causal: bool,
              order: int | None = None, heads: int = 1) -> Tensor:
    if kind == "ea_full":
        return ea_full_forward(q, k, v, causal=causal)
    if kind == "ea_series":
        return ea_series_forward(q, k, v, EaConfig(order=order, causal=causal))
    if kind == "sa":
        return sa_forward(q, k, v, heads=heads, causal=causal)
    raise ConfigError(f"unknown attention kind {kind!r}")
