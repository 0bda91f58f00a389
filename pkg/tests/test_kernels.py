import os
import subprocess
import sys

import numpy as np
import pytest

from calib_probe import _kernels_py, kernels

try:
    from calib_probe import _kernels
except ImportError:
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")


def random_boxes(rng, n):
    c = np.c_[rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(0.5, 3, n)]
    s = rng.uniform(0.5, 5, (n, 3))
    lo = c - s / 2
    lo[:, 2] = np.maximum(lo[:, 2], 0)
    return lo, c + s / 2


def unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_env_forces_fallback():
    code = "from calib_probe import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CALIB_PROBE_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_raycast_oracle():
    lo, hi = np.array([[5.0, -1, 0]]), np.array([[6.0, 1, 2]])
    o = np.array([[0.0, 0, 1], [0, 0, 1], [0, 0, 1]])
    d = np.array([[1.0, 0, 0], [-1.0, 0, 0], unit(np.array([[1.0, 0, -1]]))[0]])
    t, hit = _kernels_py.raycast(o, d, lo, hi, True, 100.0)
    assert hit[0] == 1 and t[0] == pytest.approx(5.0)
    assert hit[1] == _kernels_py.NO_HIT and np.isinf(t[1])
    assert hit[2] == _kernels_py.GROUND and t[2] == pytest.approx(np.sqrt(2))


def test_raycast_respects_max_range():
    t, hit = _kernels_py.raycast(np.array([[0.0, 0, 1]]), np.array([[1.0, 0, 0]]),
                                 np.array([[50.0, -1, 0]]), np.array([[51.0, 1, 2]]), False, 10.0)
    assert hit[0] == _kernels_py.NO_HIT


def test_zbuffer_oracle():
    out = _kernels_py.zbuffer(np.array([1, 1, 2]), np.array([0, 0, 1]), np.array([3.0, 2.0, 5.0], np.float32), 2, 3)
    assert np.array_equal(out, np.array([[0, 2, 0], [0, 0, 5]], np.float32))


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_raycast_backends_agree(seed):
    rng = np.random.default_rng(seed)
    lo, hi = random_boxes(rng, 40)
    n = 4000
    o = np.c_[rng.uniform(-10, 10, n), rng.uniform(-10, 10, n), rng.uniform(0.2, 3, n)]
    o[:10] = (lo[:10] + hi[:10]) / 2  # some origins inside boxes
    d = unit(rng.normal(size=(n, 3)))
    for ground in (True, False):
        a = _kernels_py.raycast(o, d, lo, hi, ground, 30.0)
        b = _kernels.raycast(o, d, lo, hi, ground, 30.0)
        assert np.array_equal(a[1], b[1])
        assert np.allclose(a[0], b[0], rtol=0, atol=1e-12, equal_nan=True)


@needs_ext
def test_raycast_backends_agree_without_boxes():
    rng = np.random.default_rng(9)
    o = np.c_[np.zeros((100, 2)), np.ones(100)]
    d = unit(rng.normal(size=(100, 3)))
    z = np.zeros((0, 3))
    a, b = _kernels_py.raycast(o, d, z, z, True, 50.0), _kernels.raycast(o, d, z, z, True, 50.0)
    assert np.array_equal(a[1], b[1]) and np.allclose(a[0], b[0], atol=1e-12)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_zbuffer_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n = 20000
    cols, rows = rng.integers(0, 64, n), rng.integers(0, 32, n)
    depth = rng.uniform(0.1, 80, n).astype(np.float32)
    assert np.array_equal(_kernels_py.zbuffer(cols, rows, depth, 32, 64), _kernels.zbuffer(cols, rows, depth, 32, 64))


@needs_ext
@pytest.mark.parametrize("k", [3, 5, 7, 9])
def test_densify_backends_agree(k):
    rng = np.random.default_rng(k)
    a = np.where(rng.random((40, 70)) < 0.1, rng.uniform(1, 80, (40, 70)), 0).astype(np.float32)
    assert np.array_equal(_kernels_py.densify_min(a, k), _kernels.densify_min(a, k))
