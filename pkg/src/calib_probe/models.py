"""Depth-map descriptors and the light-weight calibrators trained on them.

Every regressor predicts the 6-vector ``[tx, ty, tz, roll, pitch, yaw]``
(meters, degrees). Targets are z-scored with training statistics stored in
the model; inputs are z-scored for the linear, MLP and classifier models.
The kNN model compares raw descriptors.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegeneracyError, DegenerateFitWarning, DivergenceError
from .fileio import atomic_write_bytes
from .geometry import EulerPerturbation
from .sensor import DepthMap

MODEL_FORMAT = "calib-probe-model"
MODEL_VERSION = 1
N_OUT = 6
CELL_CHANNELS = ("depth", "occupancy", "row_offset", "col_offset")


@dataclass(frozen=True)
class DescriptorConfig:
    grid_rows: int = 8
    grid_cols: int = 16
    use_intensity: bool = False
    max_range: float = 80.0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError(f"grid must be positive, got {self.grid_rows}x{self.grid_cols}")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")

    @property
    def length(self) -> int:
        cells = self.grid_rows * self.grid_cols
        return cells * (len(CELL_CHANNELS) + (1 if self.use_intensity else 0))


@lru_cache(maxsize=32)
def _cell_layout(height: int, width: int, rows: int, cols: int):
    """Per-pixel cell index and within-cell offsets; edges follow ``array_split``."""
    if rows > height or cols > width:
        raise ConfigError(f"grid {rows}x{cols} finer than raster {height}x{width}")
    r_edges = (np.arange(rows + 1) * height) // rows
    c_edges = (np.arange(cols + 1) * width) // cols
    r = np.arange(height)
    c = np.arange(width)
    ri = np.searchsorted(r_edges, r, side="right") - 1
    ci = np.searchsorted(c_edges, c, side="right") - 1
    r_off = (r - r_edges[ri] + 0.5) / (r_edges[ri + 1] - r_edges[ri])
    c_off = (c - c_edges[ci] + 0.5) / (c_edges[ci + 1] - c_edges[ci])
    cell = (ri[:, None] * cols + ci[None, :]).ravel()
    area = np.bincount(cell, minlength=rows * cols).astype(np.float64)
    r_off_px = np.broadcast_to(r_off[:, None], (height, width)).ravel()
    c_off_px = np.broadcast_to(c_off[None, :], (height, width)).ravel()
    return cell, area, r_off_px, c_off_px


def descriptor(depth, intensity=None, config: DescriptorConfig = DescriptorConfig()) -> np.ndarray:
    """Grid statistics of a sparse depth raster.

    Per cell, over valid pixels: mean depth / max_range, occupancy fraction,
    mean row offset and mean column offset inside the cell (both in [0, 1]).
    Empty cells are all zeros. With ``use_intensity`` the per-cell mean of the
    intensity raster (over all pixels) is appended.
    """
    data = depth.data if isinstance(depth, DepthMap) else np.asarray(depth)
    h, w = data.shape
    n = config.grid_rows * config.grid_cols
    cell, area, r_off, c_off = _cell_layout(h, w, config.grid_rows, config.grid_cols)
    flat = data.ravel()
    valid = flat > 0
    cv = cell[valid]
    count = np.bincount(cv, minlength=n).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(count > 0, 1.0 / count, 0.0)
    mean_d = np.bincount(cv, weights=flat[valid].astype(np.float64), minlength=n) * inv / config.max_range
    mean_r = np.bincount(cv, weights=r_off[valid], minlength=n) * inv
    mean_c = np.bincount(cv, weights=c_off[valid], minlength=n) * inv
    parts = [mean_d, count / area, mean_r, mean_c]
    if config.use_intensity:
        if intensity is None:
            raise ConfigError("descriptor config needs an intensity raster")
        img = np.asarray(intensity, dtype=np.float64).ravel()
        if img.shape != flat.shape:
            raise ConfigError("intensity raster shape does not match depth raster")
        parts.append(np.bincount(cell, weights=img, minlength=n) / area)
    return np.concatenate(parts)


@dataclass(eq=False)
class FeatureSet:
    X: np.ndarray
    Y: np.ndarray
    config: DescriptorConfig

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> FeatureSet:
        return FeatureSet(self.X[idx], self.Y[idx], self.config)


def labels_of(samples) -> np.ndarray:
    return np.array([s.label.as_vector() for s in samples]).reshape(-1, N_OUT)


def featurize(samples, config: DescriptorConfig = DescriptorConfig()) -> FeatureSet:
    samples = list(samples)
    if samples:
        X = np.stack([descriptor(s.depth, s.intensity, config) for s in samples])
    else:
        X = np.zeros((0, config.length))
    return FeatureSet(X, labels_of(samples), config)


def _as_features(train, config) -> FeatureSet:
    if isinstance(train, FeatureSet):
        return train
    return featurize(train, config or DescriptorConfig())


@dataclass(eq=False)
class RegressorModel:
    kind: str
    config: DescriptorConfig
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "knn"):
            raise ConfigError(f"unknown regressor kind {self.kind!r}")
        d = self.config.length
        p = self.params
        shapes_ok = {
            "linear": lambda: p["W"].shape == (d, N_OUT),
            "mlp": lambda: p["W1"].shape[0] == d and p["W2"].shape[1] == N_OUT,
            "knn": lambda: p["X"].shape[1] == d and p["Y"].shape[1] == N_OUT,
        }[self.kind]
        if not shapes_ok():
            raise ConfigError(f"{self.kind} parameters do not match descriptor length {d}")


@dataclass(eq=False)
class ClassifierModel:
    config: DescriptorConfig
    params: dict
    meta: dict = field(default_factory=dict)
    kind: str = "classifier"


def _standardizer(a: np.ndarray):
    mean = a.mean(axis=0) if len(a) else np.zeros(a.shape[1])
    std = a.std(axis=0) if len(a) else np.ones(a.shape[1])
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


# ------------------------------------------------------------------ linear


def fit_linear(train, ridge: float = 1.0, config: DescriptorConfig | None = None) -> RegressorModel:
    """Ridge regression on z-scored descriptors and targets (closed form)."""
    fs = _as_features(train, config)
    if len(fs) == 0:
        raise DataError("empty training set")
    if ridge < 0:
        raise ConfigError("ridge must be non-negative")
    xm, xs = _standardizer(fs.X)
    ym, ys = _standardizer(fs.Y)
    Xs = (fs.X - xm) / xs
    Ys = (fs.Y - ym) / ys
    A = Xs.T @ Xs
    if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise DegeneracyError(
            f"normal equations singular (rank {np.linalg.matrix_rank(A)} < {A.shape[0]}); use ridge > 0"
        )
    A[np.diag_indices_from(A)] += ridge
    W = np.linalg.solve(A, Xs.T @ Ys)
    params = {"W": W, "x_mean": xm, "x_std": xs, "y_mean": ym, "y_std": ys}
    return RegressorModel("linear", fs.config, params, {"ridge": ridge, "n_train": len(fs)})


def _predict_linear(p, X):
    return ((X - p["x_mean"]) / p["x_std"]) @ p["W"] * p["y_std"] + p["y_mean"]


# --------------------------------------------------------------------- mlp


def mlp_forward(params: dict, Xs: np.ndarray) -> np.ndarray:
    h = np.maximum(Xs @ params["W1"] + params["b1"], 0.0)
    return h @ params["W2"] + params["b2"]


def mlp_loss_and_grad(params: dict, Xs: np.ndarray, Ys: np.ndarray):
    """Mean over samples of the squared L2 error, and its gradient."""
    n = len(Xs)
    pre = Xs @ params["W1"] + params["b1"]
    h = np.maximum(pre, 0.0)
    out = h @ params["W2"] + params["b2"]
    r = out - Ys
    loss = float(np.sum(r * r) / n)
    g_out = 2.0 * r / n
    g_W2 = h.T @ g_out
    g_b2 = g_out.sum(axis=0)
    g_h = g_out @ params["W2"].T
    g_pre = g_h * (pre > 0)
    g_W1 = Xs.T @ g_pre
    g_b1 = g_pre.sum(axis=0)
    return loss, {"W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2}


def fit_mlp(train, hidden: int = 64, epochs: int = 200, lr: float = 1e-4, seed: int = 0,
            batch_size: int = 32, config: DescriptorConfig | None = None) -> RegressorModel:
    """One ReLU hidden layer, L2 loss, Adam; last layer starts at zero."""
    fs = _as_features(train, config)
    if len(fs) == 0:
        raise DataError("empty training set")
    if hidden < 1:
        raise ConfigError("hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    xm, xs = _standardizer(fs.X)
    ym, ys = _standardizer(fs.Y)
    Xs = (fs.X - xm) / xs
    Ys = (fs.Y - ym) / ys
    d = Xs.shape[1]
    params = {
        "W1": rng.normal(0.0, math.sqrt(2.0 / d), size=(d, hidden)),
        "b1": np.zeros(hidden),
        "W2": np.zeros((hidden, N_OUT)),
        "b2": np.zeros(N_OUT),
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    curve = []
    n = len(Xs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = mlp_loss_and_grad(params, Xs[idx], Ys[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"MLP loss is {loss} at epoch {epoch}")
            total += loss * len(idx)
            step += 1
            for k in params:
                m[k] = b1 * m[k] + (1 - b1) * grad[k]
                v[k] = b2 * v[k] + (1 - b2) * grad[k] ** 2
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                params[k] = params[k] - lr * mh / (np.sqrt(vh) + eps)
        curve.append(total / n)
    params.update({"x_mean": xm, "x_std": xs, "y_mean": ym, "y_std": ys})
    meta = {"hidden": hidden, "epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size,
            "n_train": n, "loss_curve": curve}
    return RegressorModel("mlp", fs.config, params, meta)


def _predict_mlp(p, X):
    return mlp_forward(p, (X - p["x_mean"]) / p["x_std"]) * p["y_std"] + p["y_mean"]


# --------------------------------------------------------------------- knn


def fit_knn(train, k: int = 5, config: DescriptorConfig | None = None) -> RegressorModel:
    """Store every (descriptor, label) pair; predict the mean label of the k nearest."""
    fs = _as_features(train, config)
    if len(fs) == 0:
        raise DataError("kNN needs a non-empty training set")
    if not 1 <= k <= len(fs):
        raise ConfigError(f"k must be in [1, {len(fs)}], got {k}")
    params = {"X": fs.X.copy(), "Y": fs.Y.copy(), "k": np.array([float(k)])}
    return RegressorModel("knn", fs.config, params, {"k": k, "n_train": len(fs)})


def _predict_knn(p, X, chunk: int = 256):
    k = int(p["k"][0])
    ref, lab = p["X"], p["Y"]
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    out = np.empty((len(X), N_OUT))
    for s in range(0, len(X), chunk):
        q = X[s:s + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + ref_sq[None, :] - 2.0 * q @ ref.T
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = lab[nn].mean(axis=1)
    return out


# -------------------------------------------------------------- prediction


def _check_config(model, config: DescriptorConfig):
    if config != model.config:
        raise ConfigError(f"descriptor config mismatch: model {asdict(model.config)} vs input {asdict(config)}")


def predict_features(model: RegressorModel, fs: FeatureSet | np.ndarray) -> np.ndarray:
    """``(n, 6)`` predictions for a feature set (config checked) or a raw matrix."""
    if isinstance(fs, FeatureSet):
        _check_config(model, fs.config)
        X = fs.X
    else:
        X = np.atleast_2d(np.asarray(fs, dtype=np.float64))
    if X.shape[1] != model.config.length:
        raise ConfigError(f"descriptor length {X.shape[1]} != model's {model.config.length}")
    fn = {"linear": _predict_linear, "mlp": _predict_mlp, "knn": _predict_knn}[model.kind]
    return fn(model.params, X)


def predict(model: RegressorModel, sample) -> EulerPerturbation:
    x = descriptor(sample.depth, sample.intensity, model.config)
    return EulerPerturbation.from_vector(predict_features(model, x[None])[0])


# -------------------------------------------------------------- classifier


def _fit_logistic(Xs, y, l2: float, max_iter: int = 50, tol: float = 1e-10):
    """Newton iterations for L2-regularized logistic regression; returns (w, b)."""
    n, d = Xs.shape
    Xa = np.hstack([Xs, np.ones((n, 1))])
    w = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(max_iter):
        z = Xa @ w
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = Xa.T @ (p - y) / n + reg * w
        H = (Xa * (p * (1 - p))[:, None]).T @ Xa / n
        H[np.diag_indices_from(H)] += reg + 1e-12
        step = np.linalg.solve(H, g)
        w -= step
        if np.max(np.abs(step)) < tol:
            break
    return w[:-1], w[-1]


def fit_classifier(train, l2: float = 1e-3, config: DescriptorConfig | None = None) -> ClassifierModel:
    """Six logistic classifiers: is each label component greater than zero?

    Zero components count as "less". A component whose training labels are all
    one class gets a constant predictor and a ``DegenerateFitWarning``.
    """
    fs = _as_features(train, config)
    if len(fs) == 0:
        raise DataError("empty training set")
    xm, xs = _standardizer(fs.X)
    Xs = (fs.X - xm) / xs
    Y = (fs.Y > 0).astype(np.float64)
    W = np.zeros((Xs.shape[1], N_OUT))
    b = np.zeros(N_OUT)
    for j in range(N_OUT):
        y = Y[:, j]
        if y.min() == y.max():
            warnings.warn(f"component {j}: single-class training labels", DegenerateFitWarning, stacklevel=2)
            b[j] = 50.0 if y[0] == 1 else -50.0
            continue
        W[:, j], b[j] = _fit_logistic(Xs, y, l2)
    return ClassifierModel(fs.config, {"W": W, "b": b, "x_mean": xm, "x_std": xs},
                           {"l2": l2, "n_train": len(fs)})


def classify_features(model: ClassifierModel, fs: FeatureSet | np.ndarray) -> np.ndarray:
    """Boolean ``(n, 6)``; True means "greater than zero"."""
    if isinstance(fs, FeatureSet):
        _check_config(model, fs.config)
        X = fs.X
    else:
        X = np.atleast_2d(fs)
    p = model.params
    return ((X - p["x_mean"]) / p["x_std"]) @ p["W"] + p["b"] > 0


def classify(model: ClassifierModel, sample) -> list[str]:
    x = descriptor(sample.depth, sample.intensity, model.config)
    return ["greater" if g else "less" for g in classify_features(model, x[None])[0]]


def sign_accuracy(model: ClassifierModel, fs: FeatureSet) -> np.ndarray:
    pred = classify_features(model, fs)
    return (pred == (fs.Y > 0)).mean(axis=0)


# ------------------------------------------------------------- model files


def save_model(model, path) -> None:
    """JSON header line (self-describing) followed by a little-endian float64 block."""
    names = sorted(model.params)
    arrays = [np.ascontiguousarray(model.params[k], dtype="<f8") for k in names]
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "config": asdict(model.config),
        "meta": model.meta,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(a.tobytes() for a in arrays)
    atomic_write_bytes(path, blob)


def load_model(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    nl = buf.find(b"\n")
    try:
        header = json.loads(buf[:nl])
    except (ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: unreadable model header") from exc
    if header.get("format") != MODEL_FORMAT or "version" not in header:
        raise DataError(f"{path}: not a {MODEL_FORMAT} file")
    if header["version"] != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {header['version']}")
    params, off = {}, nl + 1
    for a in header["arrays"]:
        count = int(np.prod(a["shape"])) if a["shape"] else 1
        end = off + 8 * count
        if end > len(buf):
            raise DataError(f"{path}: truncated parameter block")
        params[a["name"]] = np.frombuffer(buf[off:end], dtype="<f8").reshape(a["shape"]).astype(np.float64)
        off = end
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes after parameter block")
    config = DescriptorConfig(**header["config"])
    if header["kind"] == "classifier":
        return ClassifierModel(config, params, header["meta"])
    return RegressorModel(header["kind"], config, params, header["meta"])
