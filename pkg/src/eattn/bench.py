"""Desk-scale cost measurements: training step, BS-L frontier, decode latency.

Memory figures are peak live tensor bytes from the allocation tracker, not
process RSS. Timings use a monotonic clock with warmup runs and report the
median; BLAS is pinned to ``EA_ATTN_THREADS`` threads (default 1).
"""

from __future__ import annotations

import csv
import gc
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import numerics as nx
from .grad import Tape, backward
from .kernels import EaConfig, parse_attention
from .model import ModelConfig, block_forward, init_params
from .numerics import TRACKER, Tensor
from .recurrent import KvCache, RecurrentState, ea_recurrent_step, sa_kv_step, state_size_bytes

REPORT_COLUMNS = ["kernel", "phase", "B", "L", "D", "order", "reps",
                  "median_ns", "tokens_per_sec", "peak_bytes"]
INFER_CHECKPOINTS = (128, 256, 512, 1024)
MIB = 1 << 20


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 4
    precision: str = "f32"
    causal: bool = True
    warmup: int = 2
    reps: int = 5
    seed: int = 0


@dataclass
class BenchRecord:
    kernel: str
    phase: str
    B: int
    L: int
    D: int
    order: int
    reps: int
    median_ns: int
    tokens_per_sec: float
    peak_bytes: int


@dataclass
class CurvePoint:
    B: int
    max_L: int
    budget: int
    peak_bytes: int
    next_L: int
    next_peak_bytes: int


def _threads() -> int:
    return max(1, int(os.environ.get("EA_ATTN_THREADS", "1")))


@contextmanager
def pinned():
    """Limit BLAS threads and keep the cyclic GC out of timed regions."""
    from threadpoolctl import threadpool_limits

    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        with threadpool_limits(limits=_threads()):
            yield
    finally:
        if was_enabled:
            gc.enable()


def _model_config(kernel: str, cfg: BenchConfig) -> ModelConfig:
    kind, order = parse_attention(kernel)
    return ModelConfig(layers=cfg.layers, d_model=cfg.d_model, heads=cfg.heads,
                       attention=kind, order=order or 2, causal=cfg.causal, max_len=1,
                       precision=cfg.precision)


def _order(kernel: str) -> int:
    return parse_attention(kernel)[1] or 0


def train_step_fn(kernel: str, B: int, L: int, cfg: BenchConfig) -> Callable[[], None]:
    """Closure running one forward+backward of the block stack on fresh inputs.

    Parameters and inputs are allocated inside the closure so that the
    tracker's peak covers them too.
    """
    mcfg = _model_config(kernel, cfg)
    dtype = nx.dtype_of(cfg.precision)
    base = {k: v.data for k, v in init_params(mcfg, cfg.seed).items() if k.startswith("block")}
    x_np = nx.Rng(cfg.seed + 1).generator.uniform(-1.0, 1.0, size=(B, L, cfg.d_model)).astype(dtype)

    def run():
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
        x = Tensor(x_np.copy())
        with Tape() as tape:
            h = x
            for i in range(mcfg.layers):
                h = block_forward(h, params, mcfg, i)
            loss = nx.mean(nx.square(h))
        backward(tape, loss, wrt=params.values())

    return run


def measure_peak(fn: Callable[[], None]) -> int:
    """Peak tensor bytes allocated by ``fn`` above the live level at entry."""
    gc.collect()
    TRACKER.reset_peak()
    start = TRACKER.live_bytes
    fn()
    peak = TRACKER.peak_bytes - start
    gc.collect()
    return int(peak)


def time_fn(fn: Callable[[], None], warmup: int, reps: int) -> list[int]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return times


def bench_train_step(kernel: str, B: int, L: int, cfg: BenchConfig = BenchConfig()) -> BenchRecord:
    fn = train_step_fn(kernel, B, L, cfg)
    with pinned():
        try:
            peak = measure_peak(fn)
            times = time_fn(fn, cfg.warmup, cfg.reps)
        except MemoryError:
            return BenchRecord(kernel, "train_fwd_bwd", B, L, cfg.d_model, _order(kernel),
                               0, 0, 0.0, -1)
    med = int(np.median(times))
    return BenchRecord(kernel, "train_fwd_bwd", B, L, cfg.d_model, _order(kernel), cfg.reps,
                       med, B * L / (med * 1e-9), peak)


def sweep_train(kernels, B: int, lengths, cfg: BenchConfig = BenchConfig()) -> list[BenchRecord]:
    return [bench_train_step(k, B, L, cfg) for k in kernels for L in lengths]


def train_peak_bytes(kernel: str, B: int, L: int, cfg: BenchConfig = BenchConfig()) -> int:
    with pinned():
        return measure_peak(train_step_fn(kernel, B, L, cfg))


def max_length(kernel: str, B: int, budget: int, cfg: BenchConfig = BenchConfig(),
               start: int = 16, limit: int = 1 << 16) -> CurvePoint | None:
    """Largest L whose training-step peak fits ``budget`` at batch size B.

    Doubles L until the budget is exceeded, then bisects on a grid of
    1/16 of the last fitting power of two.
    """
    def peak(L):
        return train_peak_bytes(kernel, B, L, cfg)

    L = start
    p = peak(L)
    if p > budget:
        return None
    lo, lo_peak = L, p
    while True:
        hi = lo * 2
        if hi > limit:
            return CurvePoint(B, lo, budget, lo_peak, hi, -1)
        hi_peak = peak(hi)
        if hi_peak > budget:
            break
        lo, lo_peak = hi, hi_peak
    step = max(1, lo // 16)
    a, b = 0, (hi - lo) // step        # lo + a*step fits, lo + b*step does not
    while b - a > 1:
        mid = (a + b) // 2
        mp = peak(lo + mid * step)
        if mp <= budget:
            a, lo_peak = mid, mp
        else:
            b, hi_peak = mid, mp
    return CurvePoint(B, lo + a * step, budget, lo_peak, lo + b * step, hi_peak)


def bs_l_curve(kernel: str, budget: int, batch_sizes, cfg: BenchConfig = BenchConfig(),
               throughput: bool = True, log=None):
    """Return (curve points, throughput records at each point)."""
    points, records = [], []
    for B in batch_sizes:
        pt = max_length(kernel, B, budget, cfg)
        if pt is None:
            if log:
                log(f"{kernel}: nothing fits {budget} bytes at B={B}; point omitted")
            continue
        points.append(pt)
        if throughput:
            records.append(bench_train_step(kernel, B, pt.max_L, cfg))
        if log:
            log(f"{kernel}: B={B} max_L={pt.max_L} peak={pt.peak_bytes}")
    return points, records


def bench_infer(kernel: str, B: int, L_max: int, cfg: BenchConfig = BenchConfig(),
                checkpoints=INFER_CHECKPOINTS, window: int = 16) -> list[BenchRecord]:
    """Teacher-forced decoding over pre-sampled q, k, v.

    Every token runs one attention step per layer per sequence. The latency
    at checkpoint L is the median step time over the ``window`` tokens ending
    at L, pooled over ``cfg.reps`` timed passes; ``peak_bytes`` is the cache
    payload held at L.
    """
    kind, order = parse_attention(kernel)
    if kind == "ea_full":
        raise ValueError("ea_full has no recurrent form")
    checkpoints = [c for c in checkpoints if c <= L_max]
    D, layers = cfg.d_model, cfg.layers
    g = nx.Rng(cfg.seed).generator
    dtype = nx.dtype_of(cfg.precision)
    qkv = g.uniform(-1.0, 1.0, size=(3, layers, B, L_max, D)).astype(dtype)

    def new_states():
        if kind == "ea_series":
            ecfg = EaConfig(order=order, causal=True)
            return [RecurrentState.for_config(D, ecfg, cfg.precision) for _ in range(layers * B)]
        return [KvCache(L_max, D, cfg.precision) for _ in range(layers * B)]

    def step(state, q, k, v):
        if kind == "ea_series":
            return ea_recurrent_step(state, q, k, v)[1]
        return sa_kv_step(state, q, k, v, cfg.heads)[1]

    def run_pass():
        states = new_states()
        times = np.empty(L_max, dtype=np.int64)
        sizes = {}
        for i in range(L_max):
            toks = [(Tensor(qkv[0, l, b, i]), Tensor(qkv[1, l, b, i]), Tensor(qkv[2, l, b, i]))
                    for l in range(layers) for b in range(B)]
            t0 = time.perf_counter_ns()
            for j, (q, k, v) in enumerate(toks):
                states[j] = step(states[j], q, k, v)
            times[i] = time.perf_counter_ns() - t0
            if i + 1 in checkpoints:
                sizes[i + 1] = sum(state_size_bytes(s) for s in states)
        return times, sizes

    with pinned():
        for _ in range(cfg.warmup):
            run_pass()
        passes = [run_pass() for _ in range(cfg.reps)]
    records = []
    for c in checkpoints:
        lo = max(0, c - window)
        pooled = np.concatenate([t[lo:c] for t, _ in passes])
        med = int(np.median(pooled))
        records.append(BenchRecord(kernel, "infer_step", B, c, D, order or 0, cfg.reps,
                                   med, B / (med * 1e-9), passes[0][1][c]))
    return records


def write_report(records, path) -> None:
    if not records:
        raise ValueError("no benchmark records to write")
    rows = sorted(records, key=lambda r: (r.kernel, r.phase, r.B, r.L))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([d[c] if c != "tokens_per_sec" else repr(float(d[c])) for c in REPORT_COLUMNS])


def read_report(path) -> list[BenchRecord]:
    types = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"int": int, "float": float, "str": str}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}))
    return out


def format_table(records) -> str:
    head = f"{'kernel':8} {'phase':14} {'B':>4} {'L':>6} {'median_ms':>10} {'tok/s':>12} {'peak_MiB':>9}"
    lines = [head]
    for r in records:
        lines.append(f"{r.kernel:8} {r.phase:14} {r.B:4d} {r.L:6d} {r.median_ns / 1e6:10.3f} "
                     f"{r.tokens_per_sec:12.1f} {r.peak_bytes / MIB:9.2f}")
    return "\n".join(lines)
