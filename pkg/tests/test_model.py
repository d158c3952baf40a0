import numpy as np
import pytest

from eattn import model as M
from eattn import numerics as nx
from eattn.data import TaskSpec, build_task
from eattn.grad import check_function
from eattn.kernels import ConfigError
from eattn.numerics import Tensor


def small(attn="ea6", **kw):
    base = dict(layers=2, d_model=8, heads=2, max_len=8, n_out=2, precision="f64")
    base.update(kw)
    return M.ModelConfig.from_attn(attn, **base)


def small_task(kind="forecast", seed=0):
    if kind == "forecast":
        return build_task(TaskSpec("forecast", 8, 2, seed=seed, n_samples=40))
    return build_task(TaskSpec("classify", 16, 2, seed=seed, n_samples=40))


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(attention="sa", d_model=10, heads=4)
    with pytest.raises(ConfigError):
        M.ModelConfig(attention="ea_series", order=3)
    with pytest.raises(ConfigError):
        M.ModelConfig(task="segment")


def test_param_count_parity_across_kernels():
    counts = {a: M.param_count(M.init_params(small(a), 0)) for a in ("ea2", "ea6", "ea_full", "sa")}
    assert len(set(counts.values())) == 1


def test_block_forward_deterministic_zero_input():
    cfg = small()
    p = M.init_params(cfg, 0)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"block0.{name}"] = Tensor(np.zeros((8, 8)))
    x = Tensor(np.zeros((1, 4, 8)))
    a = M.block_forward(x, p, cfg, 0).data
    b = M.block_forward(x, p, cfg, 0).data
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_block_grad_through_two_blocks():
    cfg = small("ea6", layers=2, d_model=4, heads=2)
    p = M.init_params(cfg, 1)
    proj = Tensor(nx.Rng(2).generator.uniform(-1, 1, size=(1, 5, 4)))
    x0 = nx.Rng(3).generator.uniform(-1, 1, size=(1, 5, 4))

    def loss(x, wq):
        q = dict(p, **{"block0.wq": wq})
        h = M.block_forward(M.block_forward(x, q, cfg, 0), q, cfg, 1)
        return nx.sum_(nx.mul(h, proj))

    reports = check_function(loss, {"x": x0, "wq": p["block0.wq"].data})
    assert max(r.max_rel_error for r in reports) < 1e-3, reports


def test_embed_position_table():
    cfg = small()
    p = M.init_params(cfg, 0)
    series = Tensor(nx.Rng(0).generator.normal(size=(2, 5, 1)))
    assert M.embed(series, p, cfg).shape == (2, 5, 8)
    zero = dict(p, **{"embed.pos": Tensor(np.zeros((8, 8)))})
    proj = series.data @ p["embed.w"].data + p["embed.b"].data
    np.testing.assert_allclose(M.embed(series, zero, cfg).data, proj)
    const = Tensor(np.ones((1, 5, 1)))
    e = M.embed(const, p, cfg).data
    assert not np.allclose(e[0, 0], e[0, 1])
    with pytest.raises(ValueError, match="exceeds"):
        M.embed(Tensor(np.zeros((1, 9, 1))), p, cfg)


def test_causal_model_ignores_future():
    cfg = small("ea6", n_out=2)
    p = M.init_params(cfg, 0)
    x = nx.Rng(4).generator.normal(size=(1, 8, 1))
    out = M.forward(Tensor(x), p, cfg).data
    for i in range(7):
        cut = x.copy()
        cut[:, i + 1:] = 0
        np.testing.assert_allclose(M.forward(Tensor(cut), p, cfg).data[:, :i + 1], out[:, :i + 1],
                                   atol=1e-6)


def test_lr_zero_keeps_params_and_init_metrics():
    cfg = small()
    splits = small_task()
    init = M.init_params(cfg, 0)
    params, hist = M.train(cfg, splits, epochs=1, seed=0, lr=0.0)
    for k in init:
        np.testing.assert_array_equal(params[k].data, init[k].data)
    by = {(e, s, m): v for e, s, m, v in hist}
    for split in ("train", "val"):
        for metric in ("mse", "mae", "rmse"):
            assert by[(1, split, metric)] == by[(0, split, metric)]
    assert M.evaluate(params, cfg, splits[1])["mse"] == by[(0, "val", "mse")]


def test_same_seed_same_history():
    cfg = small("sa")
    splits = small_task()
    assert M.train(cfg, splits, epochs=2, seed=5)[1] == M.train(cfg, splits, epochs=2, seed=5)[1]


def test_history_structure_matches_across_kernels():
    splits = small_task()
    keys = []
    for attn in ("sa", "ea6"):
        hist = M.train(small(attn), splits, epochs=2, seed=0)[1]
        keys.append([(e, s, m) for e, s, m, _ in hist])
    assert keys[0] == keys[1]


def test_best_checkpoint_chosen_on_validation():
    cfg = small()
    splits = small_task()
    params, hist = M.train(cfg, splits, epochs=4, seed=0, lr=3e-3)
    vals = [v for e, s, m, v in hist if s == "val" and m == "mse"]
    assert M.evaluate(params, cfg, splits[1])["mse"] == pytest.approx(min(vals), rel=1e-12)


def test_divergence_aborts():
    cfg = small()
    tr, va, te = small_task()
    tr.inputs[0, 0, 0] = np.nan
    with pytest.raises(M.TrainingDiverged, match="non-finite loss"):
        M.train(cfg, (tr, va, te), epochs=1, seed=0)


def test_classification_metrics_and_training():
    cfg = small("sa", task="classify", n_out=2, causal=False, max_len=16)
    splits = small_task("classify")
    params, hist = M.train(cfg, splits, epochs=2, seed=0)
    m = M.evaluate(params, cfg, splits[2])
    assert set(m) == {"accuracy", "loss"} and 0 <= m["accuracy"] <= 1


def test_constant_class_predictor_accuracy():
    cfg = small("sa", task="classify", n_out=4, causal=False, max_len=16)
    p = M.init_params(cfg, 0)
    p = {k: Tensor(np.zeros_like(v.data)) if k.startswith("head") else v for k, v in p.items()}
    p["head.b"] = Tensor(np.array([5.0, 0, 0, 0]))
    splits = build_task(TaskSpec("classify", 16, 4, seed=0, n_samples=400))
    labels = np.concatenate([s.targets for s in splits])
    from eattn.data import DatasetSplit
    allx = DatasetSplit(np.concatenate([s.inputs for s in splits]), labels, "all")
    assert M.evaluate(p, cfg, allx)["accuracy"] == pytest.approx(0.25, abs=0.01)


def test_perfect_forecast_metrics_zero():
    from eattn.data import forecast_metrics
    y = np.random.default_rng(0).normal(size=(3, 4, 1))
    assert forecast_metrics(y, y) == {"mse": 0.0, "mae": 0.0, "rmse": 0.0}


def test_loss_decreases_for_each_kernel():
    splits = build_task(TaskSpec("forecast", 8, 2, seed=1, n_samples=64))
    for attn in ("ea_full", "ea6", "sa"):
        hist = M.train(small(attn), splits, epochs=10, seed=0, lr=3e-3)[1]
        losses = [v for e, s, m, v in hist if m == "batch_loss"]
        assert np.median(losses[-5:]) < np.median(losses[:5]), attn


def test_history_and_checkpoint_round_trip(tmp_path):
    cfg = small("ea2", precision="f32")
    params, hist = M.train(cfg, small_task(), epochs=1, seed=0)
    M.write_history(hist, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "epoch,split,metric,value"
    assert M.read_history(tmp_path / "m.csv") == hist
    M.save_checkpoint(tmp_path / "c.eaat", cfg, params)
    cfg2, params2 = M.load_checkpoint(tmp_path / "c.eaat")
    assert cfg2 == cfg and list(params2) == list(params)
    for k in params:
        np.testing.assert_array_equal(params2[k].data, params[k].data)
    blob = (tmp_path / "c.eaat").read_bytes()
    assert blob[:4] == b"EAAT"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(tmp_path / "x")


def test_qk_init_gain_scales_projections():
    a = M.init_params(small(qk_init_gain=1.0), 0)
    b = M.init_params(small(qk_init_gain=0.5), 0)
    np.testing.assert_allclose(b["block0.wq"].data, 0.5 * a["block0.wq"].data)
    np.testing.assert_array_equal(b["block0.wv"].data, a["block0.wv"].data)
