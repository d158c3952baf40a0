"""Command-line entry point: verify, train, eval and the three benchmark sweeps.

Exit codes: 0 success, 1 a check failed (or a runtime error), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import bench
from . import kernels as K
from . import numerics as nx
from .data import TaskSpec, build_task
from .grad import grad_check
from .model import (ModelConfig, evaluate, load_checkpoint, save_checkpoint, train,
                    write_history)
from .numerics import Tensor
from .recurrent import stream_ea

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- verify suites

@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    cases: int
    failure: dict | None = field(default=None)
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        body = self.detail or f"max_err={self.max_error:.3e} tol={self.tolerance:.0e}"
        return f"{status} {self.name:12} {body} cases={self.cases}"


class _Worst:
    """Tracks the largest error seen and the first case that broke tolerance."""

    def __init__(self, tol: float):
        self.tol, self.err, self.cases, self.failure = tol, 0.0, 0, None

    def add(self, err: float, case: dict) -> None:
        self.cases += 1
        err = float(err) if np.isfinite(err) else np.inf
        self.err = max(self.err, err)
        if not err < self.tol and self.failure is None:
            self.failure = dict(case, error=err)

    def result(self, name: str) -> SuiteResult:
        return SuiteResult(name, self.err, self.tol, self.failure is None, self.cases, self.failure)


def _u(g, shape, lo=-1.0, hi=1.0, precision="f64") -> Tensor:
    return Tensor(g.uniform(lo, hi, size=shape).astype(nx.dtype_of(precision)))


def _inputs(*ts) -> dict:
    return {name: t.data.tolist() for name, t in zip("qkv", ts)}


def suite_recurrent(seed=0, precision="f64", trials=100, L=256, D=32, orders=(2, 6)):
    """Causal parallel form vs token-by-token recurrent engine."""
    tol = 1e-10 if precision == "f64" else 1e-4
    w = _Worst(tol)
    for order in orders:
        cfg = K.EaConfig(order=order, causal=True)
        for t in range(trials):
            case_seed = seed * 100_003 + order * 1000 + t
            g = nx.Rng(case_seed).generator
            q, k, v = (_u(g, (L, D), precision=precision) for _ in range(3))
            par = K.ea_series_forward(q, k, v, cfg).data
            rec = stream_ea(q, k, v, cfg).data
            w.add(np.max(np.abs(par - rec)), {"seed": case_seed, "order": order, "L": L, "D": D})
    return w.result("recurrent")


def suite_convergence(seed=0, precision="f64", L=64, D=16, orders=(2, 6, 10)):
    """Series error against full EA must shrink with order and be < 1e-4 at order 10."""
    g = nx.Rng(seed).generator
    q, k, v = (_u(g, (L, D), precision="f64") for _ in range(3))
    full = K.ea_full_forward(q, k, v).data
    errs = [float(np.max(np.abs(K.ea_series_forward(q, k, v, K.EaConfig(order=o)).data - full)))
            for o in orders]
    tol = 1e-4
    ok = errs[-1] < tol and all(a > b for a, b in zip(errs, errs[1:]))
    failure = None if ok else {"seed": seed, "orders": list(orders), "errors": errs,
                               "inputs": _inputs(q, k, v)}
    return SuiteResult("convergence", errs[-1], tol, ok, len(orders), failure)


def suite_examples(seed=0, precision="f64"):
    """Hand-computable two-token example (D=1)."""
    q, k, v = (Tensor(np.array(x, dtype=np.float64).reshape(2, 1))
               for x in ([1.0, 0.0], [1.0, -1.0], [1.0, 0.0]))
    full = K.ea_full_forward(q, k, v).data[0, 0]
    series = K.ea_series_forward(q, k, v, K.EaConfig(order=2)).data[0, 0]
    expect_full = 1.0 / (1.0 + np.exp(-4.0))
    errs = [abs(full - 0.98201), abs(series - 5.0 / 6.0)]
    ok = errs[0] < 1e-4 and errs[1] < 1e-10 and abs(full - expect_full) < 1e-12
    failure = None if ok else {"ea_full_y1": float(full), "ea2_y1": float(series)}
    return SuiteResult("examples", max(errs[1], 0.0), 1e-10, ok, 2, failure)


def _kernel_fns(causal: bool):
    fns = {
        "ea_full": lambda q, k, v: K.ea_full_forward(q, k, v, causal=causal),
        "ea2": lambda q, k, v: K.ea_series_forward(q, k, v, K.EaConfig(2, causal)),
        "ea6": lambda q, k, v: K.ea_series_forward(q, k, v, K.EaConfig(6, causal)),
        "sa": lambda q, k, v: K.sa_forward(q, k, v, heads=2, causal=causal),
    }
    return fns


def suite_invariants(seed=0, precision="f64", trials=1000, L=6, D=4):
    """Normalisation, shift, permutation, linearity and causal-prefix checks."""
    tol, prefix_tol = 1e-6, (1e-10 if precision == "f64" else 1e-5)
    w = _Worst(tol)
    wp = _Worst(prefix_tol)
    nc, ca = _kernel_fns(False), _kernel_fns(True)
    for t in range(trials):
        case_seed = seed * 1_000_003 + t
        g = nx.Rng(case_seed).generator
        q, k, v, v2 = (_u(g, (L, D), precision=precision) for _ in range(4))
        a, b = g.uniform(-2, 2, size=2)
        perm = g.permutation(L)
        shift = g.uniform(-1, 1, size=(1, D))
        base = {"seed": case_seed, "L": L, "D": D}
        ones = Tensor(np.ones((L, D), dtype=q.dtype))
        for name, fn in nc.items():
            y = fn(q, k, v).data
            w.add(np.max(np.abs(fn(q, k, ones).data - 1.0)), dict(base, check="normalise", kernel=name))
            yp = fn(*(Tensor(x.data[perm]) for x in (q, k, v))).data
            w.add(np.max(np.abs(yp - y[perm])), dict(base, check="permutation", kernel=name))
            mix = Tensor(a * v.data + b * v2.data)
            lin = a * y + b * fn(q, k, v2).data
            w.add(np.max(np.abs(fn(q, k, mix).data - lin)), dict(base, check="linearity", kernel=name))
        for causal, fn in ((False, nc["ea_full"]), (True, ca["ea_full"])):
            ys = fn(Tensor(q.data + shift), Tensor(k.data + shift), v).data
            w.add(np.max(np.abs(ys - fn(q, k, v).data)), dict(base, check="shift", causal=causal))
        cut = int(g.integers(1, L))
        for name, fn in ca.items():
            y = fn(q, k, v).data
            q2, k2, v3 = (Tensor(np.concatenate([x.data[:cut], _u(g, (L - cut, D), precision=precision).data]))
                          for x in (q, k, v))
            wp.add(np.max(np.abs(fn(q2, k2, v3).data[:cut] - y[:cut])),
                   dict(base, check="causal_prefix", kernel=name, cut=cut))
    r, rp = w.result("invariants"), wp.result("invariants")
    failure = r.failure or rp.failure
    return SuiteResult("invariants", max(r.max_error, rp.max_error), tol, failure is None,
                       r.cases + rp.cases, failure)


def suite_positivity(seed=0, precision="f64", trials=1000, L=8, D=4, orders=(2, 4, 6, 8, 10, 20)):
    """Every even-order denominator (before epsilon) is > 0 for inputs in [-3, 3]."""
    cases, worst, failure = 0, np.inf, None
    for t in range(trials):
        case_seed = seed * 1_000_003 + t
        g = nx.Rng(case_seed).generator
        q, k = (_u(g, (L, D), -3.0, 3.0) for _ in range(2))
        for order in orders:
            for causal in (False, True):
                m = float(K.series_denominator(q, k, K.EaConfig(order=order, causal=causal)).min())
                worst = min(worst, m)
                cases += 1
                if not m > 0 and failure is None:
                    failure = {"seed": case_seed, "order": order, "causal": causal, "min": m}
    res = SuiteResult("positivity", 0.0 if failure is None else 1.0, 0.0, failure is None,
                      cases, failure)
    res.detail = f"min_denominator={worst:.3e}"
    return res


def grad_cases():
    yield "ea_full", {}, "ea_full"
    yield "ea_full", {"causal": True}, "ea_full_causal"
    for order in (2, 6):
        for causal in (False, True):
            yield "ea_series", {"order": order, "causal": causal}, \
                f"ea{order}{'_causal' if causal else ''}"
    yield "sa", {"heads": 2}, "sa"
    yield "sa", {"heads": 2, "causal": True}, "sa_causal"


def suite_grad(seed=0, precision="f64", L=8, D=8, tol=1e-4):
    """Tape gradients vs central differences (h=1e-5, always f64)."""
    w = _Worst(tol)
    for kernel, kw, label in grad_cases():
        for rep in grad_check(kernel, (1, L, D), seed, **kw):
            w.add(rep.max_rel_error, {"seed": seed, "case": label, "input": rep.name,
                                      "L": L, "D": D})
    return w.result("grad")


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "recurrent": suite_recurrent,
    "convergence": suite_convergence,
    "examples": suite_examples,
    "invariants": suite_invariants,
    "positivity": suite_positivity,
    "grad": suite_grad,
}


def run_verify(precision="f64", seed=0, filter=None, out=print, err=None) -> bool:
    names = list(SUITES)
    if filter:
        wanted = [f.strip() for f in filter.split(",") if f.strip()]
        unknown = [f for f in wanted if f not in SUITES]
        if unknown:
            raise UsageError(f"unknown suite(s) {unknown}; choose from {names}")
        names = wanted
    err = err or (lambda s: print(s, file=sys.stderr))
    all_ok = True
    for name in names:
        res = SUITES[name](seed=seed, precision=precision)
        out(res.line())
        if not res.passed:
            all_ok = False
            err(f"reproduce {name}: " + json.dumps(res.failure, default=float))
    out("verify: " + ("all suites passed" if all_ok else "FAILED"))
    return all_ok


# ---------------------------------------------------------------- helpers

_UNITS = {"": 1, "b": 1, "k": 1000, "kb": 1000, "m": 10**6, "mb": 10**6, "g": 10**9, "gb": 10**9,
          "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30}


def parse_bytes(text: str) -> int:
    """'536870912', '512MiB', '0.5GiB', '64kb' -> bytes."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([A-Za-z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"invalid byte size {text!r}")
    n = int(float(m.group(1)) * _UNITS[m.group(2).lower()])
    if n <= 0:
        raise argparse.ArgumentTypeError(f"byte size must be positive: {text!r}")
    return n


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _kernels(text: str, allow_full: bool = True) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    for n in names:
        try:
            kind, _ = K.parse_attention(n)
        except K.ConfigError as e:
            raise UsageError(str(e)) from None
        if kind == "ea_full" and not allow_full:
            raise UsageError("ea_full has no recurrent inference form")
    if not names:
        raise UsageError("--kernels is empty")
    return names


def _task_spec(args, kind, L, n_out, n_features=1) -> TaskSpec:
    return TaskSpec(kind=kind, L=L, L_prime=n_out, n_features=n_features,
                    noise_sigma=args.noise, seed=args.seed, n_samples=args.samples,
                    source="csv" if args.data else "synthetic", csv_path=args.data,
                    columns=tuple(args.columns.split(",")) if args.columns else None)


# ---------------------------------------------------------------- subcommands

def cmd_verify(args) -> int:
    return EXIT_OK if run_verify(args.precision, args.seed, args.filter) else EXIT_FAIL


def cmd_train(args) -> int:
    if args.task == "classify" and args.horizon is not None:
        raise UsageError("--horizon applies to forecasting only")
    if args.task == "forecast" and args.classes is not None:
        raise UsageError("--classes applies to classification only")
    if args.data and args.task != "forecast":
        raise UsageError("--data (CSV) supports forecasting only")
    n_out = (args.horizon or 16) if args.task == "forecast" else (args.classes or 4)
    spec = _task_spec(args, args.task, args.L, n_out)
    splits = build_task(spec)
    n_features = splits[0].inputs.shape[-1]
    try:
        cfg = ModelConfig.from_attn(
            args.attn, layers=args.layers, d_model=args.dmodel, heads=args.heads,
            causal=(args.task == "forecast"), max_len=args.L, n_features=n_features,
            task=args.task, n_out=n_out, precision=args.precision)
    except K.ConfigError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = print if args.verbose else None
    params, history = train(cfg, splits, epochs=args.epochs, seed=args.seed, lr=args.lr,
                            batch_size=args.batch_size, log=log)
    write_history(history, out / "metrics.csv")
    save_checkpoint(out / "model.eaat", cfg, params)
    test = evaluate(params, cfg, splits[2])
    print(f"{cfg.attn_id} {args.task}: " + " ".join(f"test_{k}={v:.6g}" for k, v in test.items()))
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.eaat'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    spec = _task_spec(args, cfg.task, cfg.max_len, cfg.n_out, cfg.n_features)
    split = build_task(spec)[("train", "val", "test").index(args.split)]
    m = evaluate(params, cfg, split)
    if cfg.task == "forecast":
        print(f"{args.split}: MAE={m['mae']:.6g} RMSE={m['rmse']:.6g} MSE={m['mse']:.6g}")
    else:
        print(f"{args.split}: accuracy={m['accuracy']:.6g} loss={m['loss']:.6g}")
    return EXIT_OK


def _bench_cfg(args) -> bench.BenchConfig:
    return bench.BenchConfig(d_model=args.dmodel, layers=args.layers, heads=args.heads,
                             precision=args.precision, seed=args.seed)


def _finish_report(records, out) -> None:
    print(bench.format_table(records))
    if out:
        bench.write_report(records, out)
        print(f"wrote {out}")


def cmd_bench_train(args) -> int:
    kernels = _kernels(args.kernels)
    lengths = [L for L in (128 << i for i in range(16)) if L <= args.Lmax]
    if not lengths:
        raise UsageError("--Lmax must be >= 128")
    records = bench.sweep_train(kernels, args.batch, lengths, _bench_cfg(args))
    _finish_report(records, args.out)
    return EXIT_OK


def cmd_bench_curve(args) -> int:
    kernels = _kernels(args.kernels)
    cfg = _bench_cfg(args)
    records = []
    print("kernel   B    max_L  peak_MiB")
    for k in kernels:
        points, recs = bench.bs_l_curve(k, args.budget, args.batches, cfg)
        records += recs
        for p in points:
            print(f"{k:8} {p.B:<4} {p.max_L:6d} {p.peak_bytes / bench.MIB:9.2f}")
    if records:
        _finish_report(records, args.out)
    return EXIT_OK


def cmd_bench_infer(args) -> int:
    kernels = _kernels(args.kernels, allow_full=False)
    cfg = _bench_cfg(args)
    records = []
    for k in kernels:
        records += bench.bench_infer(k, args.batch, args.Lmax, cfg)
    _finish_report(records, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, precision="f64"):
        sp.add_argument("--precision", choices=["f32", "f64"], default=precision)
        sp.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="run the property suites")
    common(v)
    v.add_argument("--filter", help=f"comma-separated subset of {','.join(SUITES)}")
    v.set_defaults(func=cmd_verify)

    def model_flags(sp):
        sp.add_argument("--layers", type=int, default=2)
        sp.add_argument("--dmodel", type=int, default=64)
        sp.add_argument("--heads", type=int, default=4)

    def task_flags(sp):
        sp.add_argument("--data", help="CSV file (timestamp column first) for forecasting")
        sp.add_argument("--columns", help="comma-separated CSV feature columns")
        sp.add_argument("--samples", type=int, default=512, help="synthetic sample count")
        sp.add_argument("--noise", type=float, default=0.1, help="synthetic noise sigma")

    t = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    common(t, "f32")
    model_flags(t)
    task_flags(t)
    t.add_argument("--attn", default="ea6")
    t.add_argument("--task", choices=["forecast", "classify"], default="forecast")
    t.add_argument("--L", type=int, default=64)
    t.add_argument("--horizon", type=int)
    t.add_argument("--classes", type=int)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task split")
    e.add_argument("--seed", type=int, default=0)
    task_flags(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    def bench_flags(sp, kernels):
        common(sp, "f32")
        sp.add_argument("--layers", type=int, default=2)
        sp.add_argument("--dmodel", type=int, default=128)
        sp.add_argument("--heads", type=int, default=4)
        sp.add_argument("--kernels", default=kernels)
        sp.add_argument("--out", help="CSV report path")

    bt = sub.add_parser("bench-train", help="train-step time and peak bytes over L")
    bench_flags(bt, "ea2,ea6,sa")
    bt.add_argument("--batch", type=int, default=1)
    bt.add_argument("--Lmax", type=int, default=4096)
    bt.set_defaults(func=cmd_bench_train)

    bc = sub.add_parser("bench-curve", help="BS-L frontier under a tensor-byte budget")
    bench_flags(bc, "ea6,sa")
    bc.add_argument("--budget", type=parse_bytes, required=True, help="e.g. 512MiB")
    bc.add_argument("--batches", type=_int_list, default=[1, 2, 4, 8])
    bc.set_defaults(func=cmd_bench_curve)

    bi = sub.add_parser("bench-infer", help="per-token decode latency and cache bytes")
    bench_flags(bi, "ea2,ea6,sa")
    bi.add_argument("--batch", type=int, default=1)
    bi.add_argument("--Lmax", type=int, default=1024)
    bi.set_defaults(func=cmd_bench_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as e:
        print(f"{parser.prog}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
