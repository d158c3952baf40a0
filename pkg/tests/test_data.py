import numpy as np
import pytest

from eattn import data as D


def write_csv(path, n_rows, n_cols=2, bad=None):
    lines = ["time," + ",".join(f"f{j}" for j in range(n_cols))]
    for r in range(n_rows):
        vals = [f"{r * 10 + j}" for j in range(n_cols)]
        if bad and bad[0] == r:
            vals[bad[1]] = "n/a"
        lines.append(f"2024-01-01T{r:05d}," + ",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_spec_validation():
    with pytest.raises(ValueError):
        D.TaskSpec(kind="forecast", L_prime=0)
    with pytest.raises(ValueError):
        D.TaskSpec(kind="classify", L_prime=1)
    with pytest.raises(ValueError):
        D.TaskSpec(kind="regress")
    assert D.TaskSpec(kind="classify", L_prime=4).n_classes == 4


def test_forecast_splits_shapes_and_disjoint():
    spec = D.TaskSpec(n_samples=100, L=32, L_prime=8, n_features=2)
    tr, va, te = D.gen_forecast_task(spec)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    assert tr.inputs.shape == (70, 32, 2) and tr.targets.shape == (70, 8, 2)
    ids = [set(s.index.tolist()) for s in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_forecast_deterministic():
    spec = D.TaskSpec(n_samples=50, seed=3)
    a, b = D.build_task(spec), D.build_task(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inputs, y.inputs)
        np.testing.assert_array_equal(x.targets, y.targets)
    c = D.build_task(D.TaskSpec(n_samples=50, seed=4))
    assert not np.array_equal(a[0].inputs, c[0].inputs)


def test_noiseless_single_sinusoid_continues():
    spec = D.TaskSpec(n_samples=20, L=40, L_prime=10, noise_sigma=0.0, n_components=1)
    tr, _, _ = D.gen_forecast_task(spec)
    omega = D.forecast_frequencies(spec)[0]
    full = np.concatenate([tr.inputs, tr.targets], axis=1)[..., 0]
    # a sinusoid satisfies x[t+1] = 2cos(w) x[t] - x[t-1]
    resid = full[:, 2:] - 2 * np.cos(omega) * full[:, 1:-1] + full[:, :-2]
    assert np.max(np.abs(resid)) < 1e-12


def test_classify_balanced_and_deterministic():
    spec = D.TaskSpec(kind="classify", L_prime=4, n_samples=203, seed=1)
    splits = D.gen_classify_task(spec)
    labels = np.concatenate([s.targets for s in splits])
    counts = np.bincount(labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    again = D.gen_classify_task(spec)
    for a, b in zip(splits, again):
        np.testing.assert_array_equal(a.targets, b.targets)


def test_classify_dft_oracle_agrees_without_noise():
    spec = D.TaskSpec(kind="classify", L_prime=4, n_samples=120, noise_sigma=0.0, seed=5)
    bands = D.class_bands(spec)
    for split in D.gen_classify_task(spec):
        for x, y in zip(split.inputs, split.targets):
            assert D.dft_band_label(x, bands) == y


def test_class_bands_partition_bins():
    spec = D.TaskSpec(kind="classify", L=64, L_prime=4)
    bins = np.sort(np.concatenate(D.class_bands(spec)))
    np.testing.assert_array_equal(bins, np.arange(1, 32))
    with pytest.raises(ValueError):
        D.class_bands(D.TaskSpec(kind="classify", L=6, L_prime=4))


def test_csv_window_counts(tmp_path):
    tr, va, te = D.load_csv(write_csv(tmp_path / "x.csv", 100), L=6, L_prime=6)
    assert (len(tr), len(va), len(te)) == (62, 13, 14)
    assert tr.inputs.shape == (62, 6, 2) and tr.targets.shape == (62, 6, 2)


def test_csv_targets_follow_inputs(tmp_path):
    tr, _, _ = D.load_csv(write_csv(tmp_path / "x.csv", 100, n_cols=1), L=6, L_prime=6)
    for start, x, y in zip(tr.index, tr.inputs[..., 0], tr.targets[..., 0]):
        np.testing.assert_array_equal(x, 10 * np.arange(start, start + 6))
        np.testing.assert_array_equal(y, 10 * np.arange(start + 6, start + 12))


def test_csv_no_leakage(tmp_path):
    L, Lp = 6, 6
    tr, va, te = D.load_csv(write_csv(tmp_path / "x.csv", 100), L=L, L_prime=Lp)
    last_train_row = tr.index.max() + L + Lp - 1
    assert te.index.min() > last_train_row
    assert va.index.min() > tr.index.max() and te.index.min() > va.index.max()


def test_csv_column_selection(tmp_path):
    tr, _, _ = D.load_csv(write_csv(tmp_path / "x.csv", 60, n_cols=3), columns=["f2"], L=4, L_prime=2)
    assert tr.inputs.shape[-1] == 1 and tr.inputs[0, 0, 0] == 2
    with pytest.raises(ValueError, match="unknown columns"):
        D.load_csv(tmp_path / "x.csv", columns=["nope"])


def test_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_csv(tmp_path / "missing.csv")
    header_only = tmp_path / "h.csv"
    header_only.write_text("time,a\n")
    with pytest.raises(ValueError, match="insufficient rows"):
        D.load_csv(header_only)
    bad = write_csv(tmp_path / "bad.csv", 30, bad=(7, 1))
    with pytest.raises(ValueError, match=r"row 9.*'f1'"):
        D.load_csv(bad)
    with pytest.raises(ValueError, match="insufficient rows"):
        D.load_csv(write_csv(tmp_path / "short.csv", 20), L=6, L_prime=6)


def test_zscore_uses_train_statistics(tmp_path):
    splits = D.load_csv(write_csv(tmp_path / "x.csv", 200), L=8, L_prime=4)
    (tr, va, te), (mu, sd) = D.zscore(splits)
    flat = tr.inputs.reshape(-1, tr.inputs.shape[-1])
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(flat.std(axis=0) - 1) < 1e-3)
    np.testing.assert_allclose(te.inputs, (splits[2].inputs - mu) / sd)


def test_build_task_csv(tmp_path):
    path = write_csv(tmp_path / "x.csv", 100)
    spec = D.TaskSpec(L=6, L_prime=6, source="csv", csv_path=str(path))
    tr, _, _ = D.build_task(spec)
    assert len(tr) == 62
    with pytest.raises(ValueError):
        D.build_task(D.TaskSpec(kind="classify", L_prime=4, source="csv", csv_path=str(path)))


def test_persistence_and_metrics():
    split = D.DatasetSplit(np.array([[[1.0], [2.0]]]), np.array([[[2.0], [4.0]]]), "test")
    pred = D.persistence_forecast(split)
    np.testing.assert_array_equal(pred, [[[2.0], [2.0]]])
    m = D.forecast_metrics(pred, split.targets)
    assert m == {"mse": 2.0, "mae": 1.0, "rmse": np.sqrt(2.0)}
    assert D.forecast_metrics(split.targets, split.targets) == {"mse": 0.0, "mae": 0.0, "rmse": 0.0}


def test_persistence_mae_on_pure_sine():
    # One step ahead: |A sin(a + w) - A sin(a)| = 2 A |sin(w/2)| |cos(a + w/2)|.
    # With A ~ U(0.5, 1.5) and a uniform phase the mean is 2 |sin(w/2)| * 2/pi.
    spec = D.TaskSpec(n_samples=4000, L=16, L_prime=1, noise_sigma=0.0, n_components=1, seed=2)
    splits = D.gen_forecast_task(spec)
    omega = D.forecast_frequencies(spec)[0]
    inputs = np.concatenate([s.inputs for s in splits])
    targets = np.concatenate([s.targets for s in splits])
    split = D.DatasetSplit(inputs, targets, "all")
    mae = D.forecast_metrics(D.persistence_forecast(split), targets)["mae"]
    expected = 2 * abs(np.sin(omega / 2)) * 2 / np.pi
    assert abs(mae / expected - 1) < 0.05
