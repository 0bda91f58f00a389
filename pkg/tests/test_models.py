import warnings

import numpy as np
import pytest

from calib_probe import models
from calib_probe.datagen import DatasetConfig, generate_split
from calib_probe.errors import ConfigError, DataError, DegeneracyError, DegenerateFitWarning, DivergenceError
from calib_probe.models import (
    CELL_CHANNELS,
    DescriptorConfig,
    FeatureSet,
    classify_features,
    descriptor,
    featurize,
    fit_classifier,
    fit_knn,
    fit_linear,
    fit_mlp,
    load_model,
    mlp_loss_and_grad,
    predict,
    predict_features,
    save_model,
    sign_accuracy,
)

CFG = DescriptorConfig()
N_CELLS = CFG.grid_rows * CFG.grid_cols


def synthetic(n=400, d=None, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    d = d or CFG.length
    X = rng.normal(size=(n, d))
    A = rng.normal(size=(d, 6)) / np.sqrt(d)
    Y = X @ A + noise * rng.normal(size=(n, 6))
    return FeatureSet(X, Y, DescriptorConfig(use_intensity=False) if d == CFG.length else CFG), A


@pytest.fixture(scope="module")
def rendered():
    cfg = DatasetConfig(seed=3, counts={"train": 60, "val": 0, "test": 0}, worlds={"train": 3, "val": 0, "test": 0},
                        n_boxes=40, forward_extent=40.0, with_intensity=True)
    return generate_split(cfg, "train")


def channel(x, name):
    i = CELL_CHANNELS.index(name)
    return x[i * N_CELLS:(i + 1) * N_CELLS].reshape(CFG.grid_rows, CFG.grid_cols)


# ---------------------------------------------------------------- descriptor


def test_empty_raster_descriptor_is_zero():
    assert np.all(descriptor(np.zeros((160, 512), np.float32)) == 0)


def test_constant_full_raster_descriptor():
    x = descriptor(np.full((160, 512), 40.0, np.float32))
    assert np.allclose(channel(x, "depth"), 0.5)
    assert np.allclose(channel(x, "occupancy"), 1.0)
    assert np.allclose(channel(x, "row_offset"), 0.5)
    assert np.allclose(channel(x, "col_offset"), 0.5)
    assert x.shape == (CFG.length,)


def test_horizontal_shift_touches_only_boundary_cells():
    a = np.full((160, 512), 40.0, np.float32)
    b = np.zeros_like(a)
    b[:, 20:] = a[:, :-20]
    xa, xb = descriptor(a), descriptor(b)
    for name in CELL_CHANNELS:
        ca, cb = channel(xa, name), channel(xb, name)
        assert np.array_equal(ca[:, 1:], cb[:, 1:])
        if name in ("depth", "row_offset"):
            assert np.allclose(ca, cb, rtol=0, atol=1e-12)
    assert np.allclose(channel(xb, "occupancy")[:, 0], 12 / 32)
    assert np.all(channel(xb, "col_offset")[:, 0] > 0.5)


def test_intensity_channel_appended():
    cfg = DescriptorConfig(use_intensity=True)
    x = descriptor(np.zeros((160, 512), np.float32), np.full((160, 512), 0.25, np.float32), cfg)
    assert x.shape == (cfg.length,) and np.allclose(x[-N_CELLS:], 0.25)
    with pytest.raises(ConfigError):
        descriptor(np.zeros((160, 512), np.float32), None, cfg)


def test_grid_too_fine_rejected():
    with pytest.raises(ConfigError):
        descriptor(np.zeros((4, 4), np.float32), config=DescriptorConfig(8, 16))


# ---------------------------------------------------------------- linear


def test_linear_zero_labels_give_zero_weights():
    fs, _ = synthetic()
    fs = FeatureSet(fs.X, np.zeros_like(fs.Y), fs.config)
    m = fit_linear(fs, ridge=1.0)
    assert np.allclose(m.params["W"], 0) and np.allclose(predict_features(m, fs), 0)


def test_linear_recovers_planted_map():
    fs, _ = synthetic(n=2000, d=CFG.length)
    m = fit_linear(fs, ridge=1e-9)
    assert np.allclose(predict_features(m, fs), fs.Y, atol=1e-6)


def test_linear_training_error_below_label_variance():
    fs, _ = synthetic(n=600, noise=0.5)
    m = fit_linear(fs, ridge=10.0)
    mse = ((predict_features(m, fs) - fs.Y) ** 2).mean(axis=0)
    assert np.all(mse <= fs.Y.var(axis=0) + 1e-12)


def test_linear_singular_without_ridge():
    fs, _ = synthetic(n=50)
    with pytest.raises(DegeneracyError):
        fit_linear(fs, ridge=0.0)
    with pytest.raises(DataError):
        fit_linear(fs.subset(np.array([], dtype=int)))


def test_finer_grid_fits_training_set_at_least_as_well(rendered):
    errs = []
    for rows, cols in [(2, 4), (4, 8), (8, 16)]:
        fs = featurize(rendered, DescriptorConfig(rows, cols))
        m = fit_linear(fs, ridge=1e-6)
        errs.append(((predict_features(m, fs) - fs.Y) ** 2).mean())
    assert errs[0] >= errs[1] - 1e-9 >= errs[2] - 2e-9


# ---------------------------------------------------------------- mlp


def test_mlp_zero_labels():
    fs, _ = synthetic(n=100)
    fs = FeatureSet(fs.X, np.zeros_like(fs.Y), fs.config)
    m = fit_mlp(fs, hidden=8, epochs=3, lr=1e-3, seed=0)
    assert m.meta["loss_curve"][-1] < 1e-6


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(7, 5)), rng.normal(size=(7, 6))
    p = {"W1": rng.normal(size=(5, 4)), "b1": rng.normal(size=4), "W2": rng.normal(size=(4, 6)), "b2": rng.normal(size=6)}
    _, g = mlp_loss_and_grad(p, X, Y)
    eps = 1e-6
    for k in p:
        it = np.nditer(p[k], flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[k][i]
            p[k][i] = old + eps
            lp, _ = mlp_loss_and_grad(p, X, Y)
            p[k][i] = old - eps
            lm, _ = mlp_loss_and_grad(p, X, Y)
            p[k][i] = old
            assert (lp - lm) / (2 * eps) == pytest.approx(g[k][i], abs=1e-5)


def test_mlp_deterministic_and_seed_sensitive():
    fs, _ = synthetic(n=200)
    a = fit_mlp(fs, hidden=16, epochs=5, lr=1e-3, seed=4)
    b = fit_mlp(fs, hidden=16, epochs=5, lr=1e-3, seed=4)
    c = fit_mlp(fs, hidden=16, epochs=5, lr=1e-3, seed=5)
    assert np.array_equal(predict_features(a, fs), predict_features(b, fs))
    assert not np.array_equal(predict_features(a, fs), predict_features(c, fs))


def test_mlp_loss_trends_down():
    fs, _ = synthetic(n=400, noise=0.1)
    curve = fit_mlp(fs, hidden=32, epochs=30, lr=1e-3, seed=1).meta["loss_curve"]
    assert all(b <= 1.05 * a for a, b in zip(curve, curve[1:]))
    assert curve[-1] < 0.5 * curve[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mlp_non_finite_inputs_diverge():
    fs, _ = synthetic(n=50)
    X = fs.X.copy()
    X[0, 0] = np.inf
    with pytest.raises(DivergenceError):
        fit_mlp(FeatureSet(X, fs.Y, fs.config), hidden=4, epochs=1, seed=0)


# ---------------------------------------------------------------- knn


def test_knn_exact_and_global_mean():
    fs, _ = synthetic(n=50)
    one = fit_knn(fs, k=1)
    assert np.allclose(predict_features(one, fs), fs.Y)
    allk = fit_knn(fs, k=len(fs))
    assert np.allclose(predict_features(allk, fs), fs.Y.mean(axis=0))


def test_knn_validation():
    fs, _ = synthetic(n=10)
    with pytest.raises(DataError):
        fit_knn(fs.subset(np.array([], dtype=int)))
    with pytest.raises(ConfigError):
        fit_knn(fs, k=11)


# ---------------------------------------------------------------- classifier


def test_classifier_separable_signs():
    fs, _ = synthetic(n=3000, seed=2)
    m = fit_classifier(fs, l2=1e-6)
    assert np.all(sign_accuracy(m, fs) > 0.99)


def test_classifier_random_labels_near_chance():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20000, 20))
    Y = rng.choice([-1.0, 1.0], size=(20000, 6))
    fs = FeatureSet(X, Y, CFG)
    m = fit_classifier(fs.subset(np.arange(10000)))
    acc = sign_accuracy(m, fs.subset(np.arange(10000, 20000)))
    assert np.all(np.abs(acc - 0.5) < 0.03)


def test_classifier_single_class_warns_and_zero_is_less():
    fs, _ = synthetic(n=100)
    Y = fs.Y.copy()
    Y[:, 0] = 0.0
    with pytest.warns(DegenerateFitWarning):
        m = fit_classifier(FeatureSet(fs.X, Y, fs.config))
    assert not np.any(classify_features(m, fs)[:, 0])


# ---------------------------------------------------------------- prediction and files


def test_prediction_is_pure(rendered):
    fs = featurize(rendered, CFG)
    m = fit_linear(fs)
    a = predict(m, rendered[0])
    b = predict(m, rendered[0])
    assert a == b
    assert np.allclose(a.as_vector(), predict_features(m, fs)[0])


def test_config_mismatch_rejected(rendered):
    m = fit_linear(featurize(rendered, CFG))
    with pytest.raises(ConfigError):
        predict_features(m, featurize(rendered, DescriptorConfig(4, 8)))
    with pytest.raises(ConfigError):
        predict_features(m, np.zeros((1, 7)))


@pytest.mark.parametrize("kind", ["linear", "mlp", "knn", "classifier"])
def test_model_file_round_trip(tmp_path, kind):
    fs, _ = synthetic(n=80)
    m = {
        "linear": lambda: fit_linear(fs),
        "mlp": lambda: fit_mlp(fs, hidden=8, epochs=2, seed=0),
        "knn": lambda: fit_knn(fs, k=3),
        "classifier": lambda: fit_classifier(fs),
    }[kind]()
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    if kind == "classifier":
        assert np.array_equal(classify_features(m, fs), classify_features(back, fs))
    else:
        assert np.array_equal(predict_features(m, fs), predict_features(back, fs))


def test_model_file_corruption(tmp_path):
    fs, _ = synthetic(n=30)
    save_model(fit_linear(fs), tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(DataError):
        load_model(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"garbage" * 10)
    with pytest.raises(DataError):
        load_model(tmp_path / "x.bin")
    with pytest.raises(DataError):
        load_model(tmp_path / "missing.bin")


def test_model_version_mismatch(tmp_path, monkeypatch):
    fs, _ = synthetic(n=30)
    monkeypatch.setattr(models, "MODEL_VERSION", 99)
    save_model(fit_linear(fs), tmp_path / "m.bin")
    monkeypatch.undo()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(DataError):
            load_model(tmp_path / "m.bin")
