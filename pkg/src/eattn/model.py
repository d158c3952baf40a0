"""Toy-scale post-LN Transformer for forecasting and classification."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, forecast_metrics
from .grad import Tape, backward
from .kernels import ConfigError, attention, parse_attention, taylor_coeffs
from .numerics import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_mult: int = 4
    attention: str = "ea_series"   # ea_full | ea_series | sa
    order: int = 6
    causal: bool = True
    max_len: int = 64
    n_features: int = 1
    task: str = "forecast"          # forecast | classify
    n_out: int = 16                 # horizon (forecast) or classes (classify)
    precision: str = "f32"
    qk_init_gain: float = 0.3       # keeps q, k near 0 where the Taylor kernel is accurate

    def __post_init__(self):
        if self.attention not in ("ea_full", "ea_series", "sa"):
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.attention == "sa" and self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.attention == "ea_series":
            taylor_coeffs(self.order)
        if self.task not in ("forecast", "classify"):
            raise ConfigError(f"unknown task {self.task!r}")

    @classmethod
    def from_attn(cls, attn: str, **kw) -> "ModelConfig":
        kind, order = parse_attention(attn)
        if order is not None:
            kw["order"] = order
        return cls(attention=kind, **kw)

    @property
    def attn_id(self) -> str:
        return f"ea{self.order}" if self.attention == "ea_series" else self.attention

    @property
    def head_width(self) -> int:
        return self.n_out * self.n_features if self.task == "forecast" else self.n_out


Params = dict  # name -> Tensor



def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    g = nx.Rng(seed).generator
    dtype = nx.dtype_of(cfg.precision)
    D, H = cfg.d_model, cfg.d_model * cfg.ffn_mult

    def xavier(fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(g.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype))

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype))

    p = {
        "embed.w": xavier(cfg.n_features, D),
        "embed.b": const((D,), 0.0),
        "embed.pos": Tensor(g.normal(0.0, 0.02, size=(cfg.max_len, D)).astype(dtype)),
    }
    for i in range(cfg.layers):
        pre = f"block{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = xavier(D, D)
        for name in ("wq", "wk"):
            p[pre + name].data *= cfg.qk_init_gain
        p[pre + "ln1.g"], p[pre + "ln1.b"] = const((D,), 1.0), const((D,), 0.0)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = const((D,), 1.0), const((D,), 0.0)
        p[pre + "ffn.w1"], p[pre + "ffn.b1"] = xavier(D, H), const((H,), 0.0)
        p[pre + "ffn.w2"], p[pre + "ffn.b2"] = xavier(H, D), const((D,), 0.0)
    p["head.w"] = xavier(D, cfg.head_width)
    p["head.b"] = const((cfg.head_width,), 0.0)
    return p


def param_count(params: Params) -> int:
    return sum(int(t.data.size) for t in params.values())


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = nx.mean(x, axis=-1, keepdims=True)
    xc = nx.sub(x, mu)
    var = nx.mean(nx.square(xc), axis=-1, keepdims=True)
    return nx.add(nx.mul(nx.div(xc, nx.sqrt(nx.add(var, eps))), gain), bias)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = nx.mul(nx.add(x, nx.mul(nx.mul(nx.square(x), x), 0.044715)), math.sqrt(2.0 / math.pi))
    return nx.mul(nx.mul(x, nx.add(nx.tanh(inner), 1.0)), 0.5)


def block_forward(x: Tensor, params: Params, cfg: ModelConfig, index: int = 0) -> Tensor:
    pre = f"block{index}."
    q = nx.matmul(x, params[pre + "wq"])
    k = nx.matmul(x, params[pre + "wk"])
    v = nx.matmul(x, params[pre + "wv"])
    a = attention(cfg.attention, q, k, v, causal=cfg.causal, order=cfg.order, heads=cfg.heads)
    a = nx.matmul(a, params[pre + "wo"])
    x1 = layer_norm(nx.add(x, a), params[pre + "ln1.g"], params[pre + "ln1.b"])
    h = gelu(nx.add(nx.matmul(x1, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
    h = nx.add(nx.matmul(h, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
    return layer_norm(nx.add(x1, h), params[pre + "ln2.g"], params[pre + "ln2.b"])


def embed(series: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    L = series.shape[-2]
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds positional table size {cfg.max_len}")
    x = nx.add(nx.matmul(series, params["embed.w"]), params["embed.b"])
    return nx.add(x, nx.getitem(params["embed.pos"], slice(0, L)))


def encode(series: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    x = embed(series, params, cfg)
    for i in range(cfg.layers):
        x = block_forward(x, params, cfg, i)
    return x


def forward(series: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Forecast task: per-position outputs (B, L, horizon*F); classify: logits (B, C)."""
    x = encode(series, params, cfg)
    if cfg.task == "classify":
        x = nx.mean(x, axis=-2)
    return nx.add(nx.matmul(x, params["head.w"]), params["head.b"])


def predict_forecast(series: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Forecast from the last position's representation: (B, horizon, F)."""
    out = forward(series, params, cfg)
    B = out.shape[0]
    last = nx.getitem(out, (slice(None), -1))
    return nx.reshape(last, (B, cfg.n_out, cfg.n_features))


def loss_fn(batch_x: Tensor, batch_y: np.ndarray, params: Params, cfg: ModelConfig) -> Tensor:
    if cfg.task == "forecast":
        pred = predict_forecast(batch_x, params, cfg)
        return nx.mean(nx.square(nx.sub(pred, Tensor(batch_y.astype(pred.dtype)))))
    logits = forward(batch_x, params, cfg)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(batch_y)), batch_y] = 1.0
    return nx.neg(nx.mean(nx.sum_(nx.mul(nx.log_softmax(logits, -1), Tensor(onehot)), axis=-1)))


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def evaluate(params: Params, cfg: ModelConfig, split: DatasetSplit,
             batch_size: int = 128) -> dict[str, float]:
    """MSE/MAE/RMSE for forecasting, accuracy and cross-entropy for classification."""
    dtype = nx.dtype_of(cfg.precision)
    if cfg.task == "forecast":
        preds = [predict_forecast(Tensor(split.inputs[sl].astype(dtype)), params, cfg).data
                 for sl in _batches(len(split), batch_size)]
        return forecast_metrics(np.concatenate(preds), split.targets)
    logits = np.concatenate([forward(Tensor(split.inputs[sl].astype(dtype)), params, cfg).data
                             for sl in _batches(len(split), batch_size)]).astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    labels = split.targets
    return {
        "accuracy": float(np.mean(np.argmax(logits, axis=-1) == labels)),
        "loss": float(-np.mean(logp[np.arange(len(labels)), labels])),
    }


class Adam:
    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> Params:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = Tensor((p.data - upd).astype(p.dtype))
        return out


def loss_and_grads(params: Params, cfg: ModelConfig, x: np.ndarray, y: np.ndarray):
    dtype = nx.dtype_of(cfg.precision)
    leaves = {k: Tensor(t.data, requires_grad=True) for k, t in params.items()}
    with Tape() as tape:
        loss = loss_fn(Tensor(x.astype(dtype)), y, leaves, cfg)
    grads = backward(tape, loss, wrt=leaves.values())
    return loss.item(), {k: grads[t].data for k, t in leaves.items()}


def _selection_score(cfg: ModelConfig, metrics: dict[str, float]) -> float:
    return metrics["mse"] if cfg.task == "forecast" else metrics["loss"]


def train(cfg: ModelConfig, splits, epochs: int = 30, seed: int = 0, lr: float = 1e-3,
          batch_size: int = 16, log=None):
    """Adam training; returns (best-on-validation params, metric history).

    History rows are (epoch, split, metric, value); epoch 0 holds the
    metrics of the initial parameters.
    """
    train_split, val_split = splits[0], splits[1]
    params = init_params(cfg, seed)
    opt = Adam(params, lr=lr)
    order_rng = nx.Rng(seed + 7919).generator
    history: list[tuple[int, str, str, float]] = []

    def record(epoch, p):
        scores = {}
        for split in (train_split, val_split):
            m = evaluate(p, cfg, split)
            scores[split.tag] = m
            for name, value in m.items():
                history.append((epoch, split.tag, name, value))
        return scores

    best = params
    best_score = _selection_score(cfg, record(0, params)["val"])
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(len(train_split))
        losses = []
        for sl in _batches(len(perm), batch_size):
            ix = perm[sl]
            loss, grads = loss_and_grads(params, cfg, train_split.inputs[ix], train_split.targets[ix])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} ({cfg.attn_id}, lr={lr}, seed={seed})")
            losses.append(loss)
            params = opt.step(params, grads)
        history.append((epoch, "train", "batch_loss", float(np.mean(losses))))
        scores = record(epoch, params)
        score = _selection_score(cfg, scores["val"])
        if score < best_score:
            best, best_score = params, score
        if log:
            log(f"epoch {epoch:3d} {cfg.attn_id} loss={np.mean(losses):.4f} "
                + " ".join(f"val_{k}={v:.4f}" for k, v in scores["val"].items()))
    return best, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "metric", "value"])
        for row in history:
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])


def read_history(path) -> list[tuple[int, str, str, float]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(int(d["epoch"]), d["split"], d["metric"], float(d["value"])) for d in r]


# ---------------------------------------------------------------------------
# checkpoint container: "EAAT" | u32 version | u32 len + UTF-8 JSON config |
# repeated (u16 name len, name, u8 rank, u32 dims..., little-endian f32 payload)

MAGIC = b"EAAT"
VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: Params) -> None:
    text = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, Params]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = ModelConfig(**json.loads(blob[pos:pos + n].decode("utf-8")))
    pos += n
    dtype = nx.dtype_of(cfg.precision)
    params: Params = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        params[name] = Tensor(arr.astype(dtype))
    return cfg, params


def with_precision(cfg: ModelConfig, precision: str) -> ModelConfig:
    return replace(cfg, precision=precision)
