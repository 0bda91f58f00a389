"""Extrinsics from explicit 2D-3D correspondences: EPnP, Gauss-Newton refinement, RANSAC.

All poses map LiDAR-frame points into the camera frame (``x_cam = R x + t``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConvergenceWarning, DataError, DegeneracyError, RansacFailure
from .fileio import atomic_write_text
from .geometry import RigidTransform, orthonormalize
from .sensor import NEAR_PLANE, Intrinsics

MIN_POINTS = 4
MIN_RANSAC_POINTS = 6
REFINE_MAX_ITERS = 50
REFINE_STEP_TOL = 1e-10
REFINE_COST_RTOL = 1e-12
MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class Correspondences:
    """``n`` matched LiDAR points (meters) and pixels, with optional weights in [0, 1]."""

    points: np.ndarray
    pixels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        uv = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if len(p) != len(uv):
            raise ValueError(f"{len(p)} points but {len(uv)} pixels")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(uv))):
            raise ValueError("correspondences must be finite")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "pixels", uv)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(p) or np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
                raise ValueError("weights must be finite, in [0, 1], one per correspondence")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> Correspondences:
        w = None if self.weights is None else self.weights[idx]
        return Correspondences(self.points[idx], self.pixels[idx], w)

    def w(self) -> np.ndarray:
        return np.ones(len(self)) if self.weights is None else self.weights

    def check_bounds(self, k: Intrinsics) -> None:
        u, v = self.pixels[:, 0], self.pixels[:, 1]
        bad = (u < -0.5) | (u >= k.width - 0.5) | (v < -0.5) | (v >= k.height - 0.5)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"correspondence {i}: pixel {tuple(self.pixels[i])} outside {k.width}x{k.height} image")


def read_correspondences(path, k: Intrinsics | None = None) -> Correspondences:
    """Parse ``X Y Z u v [w]`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    rows, weights = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise DataError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        rows.append(vals[:5])
        weights.append(vals[5] if len(vals) == 6 else None)
    has_w = [w is not None for w in weights]
    if any(has_w) and not all(has_w):
        raise DataError(f"{path}: weights given on some lines but not others")
    a = np.array(rows, dtype=np.float64).reshape(-1, 5)
    try:
        corr = Correspondences(a[:, :3], a[:, 3:], np.array(weights, dtype=np.float64) if all(has_w) and rows else None)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if k is not None:
        corr.check_bounds(k)
    return corr


def write_correspondences(path, corr: Correspondences) -> None:
    lines = []
    for i in range(len(corr)):
        vals = list(corr.points[i]) + list(corr.pixels[i])
        if corr.weights is not None:
            vals.append(corr.weights[i])
        lines.append(" ".join(f"{x:.17g}" for x in vals))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------- projection


def project(t: RigidTransform, points: np.ndarray, k: Intrinsics):
    """Continuous pixels and camera depths of ``points`` under pose ``t``."""
    pc = points @ t.rotation.T + t.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return uv, z


def reprojection_errors(t: RigidTransform, corr: Correspondences, k: Intrinsics) -> np.ndarray:
    """Per-correspondence pixel distance; ``inf`` for points behind the near plane."""
    uv, z = project(t, corr.points, k)
    err = np.linalg.norm(uv - corr.pixels, axis=1)
    err[~(z > NEAR_PLANE)] = np.inf
    return err


def reprojection_cost(t: RigidTransform, corr: Correspondences, k: Intrinsics) -> float:
    """Weighted sum of squared pixel residuals."""
    uv, z = project(t, corr.points, k)
    if not np.all(z > NEAR_PLANE):
        return math.inf
    r2 = np.sum((uv - corr.pixels) ** 2, axis=1)
    return float(np.sum(corr.w() * r2))


# ---------------------------------------------------------------- EPnP

_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _control_points(pw: np.ndarray) -> np.ndarray:
    c0 = pw.mean(axis=0)
    a = pw - c0
    lam, vec = np.linalg.eigh(a.T @ a / len(pw))
    if not lam[-1] > 0 or lam[0] <= 1e-10 * lam[-1]:
        raise DegeneracyError("EPnP: 3D points are coplanar or collinear")
    ctrl = [c0] + [c0 + math.sqrt(lam[i]) * vec[:, i] for i in (2, 1, 0)]
    return np.array(ctrl)


def _barycentric(pw: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    c = (ctrl[1:] - ctrl[0]).T
    a = np.linalg.solve(c, (pw - ctrl[0]).T).T
    return np.column_stack([1.0 - a.sum(axis=1), a])


def _m_matrix(alphas: np.ndarray, uv: np.ndarray, k: Intrinsics) -> np.ndarray:
    n = len(alphas)
    m = np.zeros((2 * n, 12))
    for j in range(4):
        a = alphas[:, j]
        m[0::2, 3 * j] = a * k.fx
        m[0::2, 3 * j + 2] = a * (k.cx - uv[:, 0])
        m[1::2, 3 * j + 1] = a * k.fy
        m[1::2, 3 * j + 2] = a * (k.cy - uv[:, 1])
    return m


def _l_matrix(v: np.ndarray) -> np.ndarray:
    """6x10 map from products of the four betas to squared control-point distances."""
    dv = np.empty((4, 6, 3))
    for i in range(4):
        vi = v[i].reshape(4, 3)
        for p, (a, b) in enumerate(_PAIRS):
            dv[i, p] = vi[a] - vi[b]
    d = lambda i, j: np.sum(dv[i] * dv[j], axis=1)  # noqa: E731
    return np.column_stack([
        d(0, 0), 2 * d(0, 1), d(1, 1), 2 * d(0, 2), 2 * d(1, 2),
        d(2, 2), 2 * d(0, 3), 2 * d(1, 3), 2 * d(2, 3), d(3, 3),
    ])


def _beta_products(b):
    b0, b1, b2, b3 = b
    return np.array([b0 * b0, b0 * b1, b1 * b1, b0 * b2, b1 * b2, b2 * b2, b0 * b3, b1 * b3, b2 * b3, b3 * b3])


def _gauss_newton_betas(l6: np.ndarray, rho: np.ndarray, betas: np.ndarray, iters: int = 5) -> np.ndarray:
    b = betas.copy()
    for _ in range(iters):
        b0, b1, b2, b3 = b
        jac = np.column_stack([
            2 * l6[:, 0] * b0 + l6[:, 1] * b1 + l6[:, 3] * b2 + l6[:, 6] * b3,
            l6[:, 1] * b0 + 2 * l6[:, 2] * b1 + l6[:, 4] * b2 + l6[:, 7] * b3,
            l6[:, 3] * b0 + l6[:, 4] * b1 + 2 * l6[:, 5] * b2 + l6[:, 8] * b3,
            l6[:, 6] * b0 + l6[:, 7] * b1 + l6[:, 8] * b2 + 2 * l6[:, 9] * b3,
        ])
        r = rho - l6 @ _beta_products(b)
        step = np.linalg.lstsq(jac, r, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        b = b + step
    return b


def _initial_betas(l6: np.ndarray, rho: np.ndarray, n: int) -> np.ndarray:
    """Linearized beta estimate using ``n`` null-space vectors (1, 2 or 3)."""
    b = np.zeros(4)
    if n == 1:
        x = np.linalg.lstsq(l6[:, [0, 1, 3, 6]], rho, rcond=None)[0]
        s = -1.0 if x[0] < 0 else 1.0
        b[0] = math.sqrt(s * x[0])
        if b[0] > 0:
            b[1:] = s * x[1:] / b[0]
        return b
    cols = [0, 1, 2] if n == 2 else [0, 1, 2, 3, 4]
    x = np.linalg.lstsq(l6[:, cols], rho, rcond=None)[0]
    s = -1.0 if x[0] < 0 else 1.0
    b[0] = math.sqrt(s * x[0])
    b[1] = math.sqrt(s * x[2]) if s * x[2] > 0 else 0.0
    if x[1] < 0:
        b[0] = -b[0]
    if n == 3 and b[0] != 0:
        b[2] = x[3] / b[0]
    return b


def _procrustes(pw: np.ndarray, pc: np.ndarray) -> RigidTransform:
    cw, cc = pw.mean(axis=0), pc.mean(axis=0)
    h = (pc - cc).T @ (pw - cw)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    r = orthonormalize(r)
    return RigidTransform(r, cc - r @ cw)


def _pose_from_betas(betas, v, alphas, pw):
    ccs = sum(b * vi for b, vi in zip(betas, v)).reshape(4, 3)
    pc = alphas @ ccs
    if np.mean(pc[:, 2]) < 0:
        pc = -pc
    return _procrustes(pw, pc)


def epnp(corr: Correspondences, k: Intrinsics) -> RigidTransform:
    """Closed-form pose from >= 4 non-coplanar correspondences.

    Tries the 1-, 2- and 3-vector null-space hypotheses (each polished by a
    Gauss-Newton pass on the betas) and keeps the one with the lowest
    reprojection cost. Raises ``DegeneracyError`` rather than returning NaN.
    """
    if len(corr) < MIN_POINTS:
        raise DegeneracyError(f"EPnP needs at least {MIN_POINTS} correspondences, got {len(corr)}")
    pw = corr.points
    ctrl = _control_points(pw)
    alphas = _barycentric(pw, ctrl)
    m = _m_matrix(alphas, corr.pixels, k)
    mtm = m.T @ m
    if not np.all(np.isfinite(mtm)):
        raise DegeneracyError("EPnP: non-finite measurement matrix")
    _, vec = np.linalg.eigh(mtm)
    v = [vec[:, i] for i in range(4)]
    l6 = _l_matrix(v)
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in _PAIRS])
    best, best_cost = None, math.inf
    with np.errstate(all="ignore"):
        for n in (1, 2, 3):
            betas = _gauss_newton_betas(l6, rho, _initial_betas(l6, rho, n))
            if not np.all(np.isfinite(betas)):
                continue
            try:
                t = _pose_from_betas(betas, v, alphas, pw)
            except np.linalg.LinAlgError:
                continue
            if not (np.all(np.isfinite(t.rotation)) and np.all(np.isfinite(t.translation))):
                continue
            uv, z = project(t, pw, k)
            cost = float(np.sum((uv - corr.pixels) ** 2)) if np.all(z > 0) else math.inf
            if best is None or cost < best_cost:
                best, best_cost = t, cost
    if best is None:
        raise DegeneracyError("EPnP: no finite pose hypothesis")
    return best


# ---------------------------------------------------------------- refinement


def _rodrigues(w: np.ndarray) -> np.ndarray:
    th = float(np.linalg.norm(w))
    kx = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-12:
        return np.eye(3) + kx
    return np.eye(3) + math.sin(th) / th * kx + (1 - math.cos(th)) / th ** 2 * (kx @ kx)


def _apply_increment(t: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Left-multiplicative update ``(exp(w), v) @ t`` with ``delta = (w, v)``."""
    r = _rodrigues(delta[:3])
    return RigidTransform(orthonormalize(r @ t.rotation), r @ t.translation + delta[3:])


def _residuals_and_jacobian(t: RigidTransform, corr: Correspondences, k: Intrinsics):
    pc = corr.points @ t.rotation.T + t.translation
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    sw = np.sqrt(corr.w())
    r = ((uv - corr.pixels) * sw[:, None]).ravel()
    n = len(pc)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = k.fx / z
    dpi[:, 0, 2] = -k.fx * x / z ** 2
    dpi[:, 1, 1] = k.fy / z
    dpi[:, 1, 2] = -k.fy * y / z ** 2
    # d p / d(w, v) = [-[p]x, I]
    dp = np.zeros((n, 3, 6))
    dp[:, 0, 1], dp[:, 0, 2] = z, -y
    dp[:, 1, 0], dp[:, 1, 2] = -z, x
    dp[:, 2, 0], dp[:, 2, 1] = y, -x
    dp[:, :, 3:] = np.eye(3)
    jac = np.einsum("nij,njk->nik", dpi, dp) * sw[:, None, None]
    return r, jac.reshape(2 * n, 6)


@dataclass(frozen=True)
class RefineResult:
    pose: RigidTransform
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    costs: tuple


def refine_detailed(t0: RigidTransform, corr: Correspondences, k: Intrinsics,
                    max_iters: int = REFINE_MAX_ITERS) -> RefineResult:
    """Gauss-Newton on the weighted squared reprojection cost with step halving.

    A step is only accepted if it does not raise the cost, so the cost sequence
    is non-increasing. Stops when the proposed step norm drops below 1e-10, when
    an accepted step lowers the cost by less than a relative 1e-12, or when no
    halving of the step reduces the cost.
    """
    t = t0
    cost = reprojection_cost(t, corr, k)
    costs = [cost]
    if not math.isfinite(cost):
        raise DegeneracyError("refine: initial pose puts correspondences behind the camera")
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        r, jac = _residuals_and_jacobian(t, corr, k)
        step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            raise DegeneracyError("refine: singular normal equations")
        if np.linalg.norm(step) < REFINE_STEP_TOL:
            converged = True
            break
        for _ in range(MAX_HALVINGS):
            cand = _apply_increment(t, step)
            c = reprojection_cost(cand, corr, k)
            if c <= cost:
                break
            step = step / 2
        else:
            converged = True
            break
        stalled = cost - c <= REFINE_COST_RTOL * max(cost, 1e-300)
        t, cost = cand, c
        costs.append(cost)
        if stalled:
            converged = True
            break
    else:
        it = max_iters
    return RefineResult(t, costs[0], cost, it, converged, tuple(costs))


def refine(t0: RigidTransform, corr: Correspondences, k: Intrinsics,
           max_iters: int = REFINE_MAX_ITERS) -> RigidTransform:
    res = refine_detailed(t0, corr, k, max_iters)
    if not res.converged:
        warnings.warn(
            f"refine did not converge in {max_iters} iterations (final cost {res.final_cost:.6g})",
            ConvergenceWarning, stacklevel=2,
        )
    return res.pose


# ---------------------------------------------------------------- RANSAC


def ransac_subsets(n: int, iters: int, rng: np.random.Generator, size: int = MIN_RANSAC_POINTS) -> np.ndarray:
    """All hypothesis subsets drawn up front so the result does not depend on evaluation order."""
    if n < size:
        raise DegeneracyError(f"RANSAC needs at least {size} correspondences, got {n}")
    return np.array([rng.choice(n, size=size, replace=False) for _ in range(iters)], dtype=np.int64).reshape(-1, size)


def ransac_pnp(corr: Correspondences, k: Intrinsics, threshold: float, iters: int,
               rng: np.random.Generator):
    """Hypothesize-and-verify EPnP on 6-point subsets, then refine on the consensus set.

    Inliers have reprojection error strictly below ``threshold`` pixels.
    Returns ``(pose, inlier_mask)``; raises ``RansacFailure`` if no hypothesis
    gathers at least 6 inliers.
    """
    n = len(corr)
    subsets = ransac_subsets(n, iters, rng)
    best_mask, best_key = None, None
    for idx in subsets:
        try:
            t = epnp(corr.subset(idx), k)
        except DegeneracyError:
            continue
        err = reprojection_errors(t, corr, k)
        mask = err < threshold
        cnt = int(mask.sum())
        key = (cnt, -float(np.sum(err[mask])))
        if best_key is None or key > best_key:
            best_key, best_mask = key, mask
    if best_mask is None or best_key[0] < MIN_RANSAC_POINTS:
        got = 0 if best_key is None else best_key[0]
        raise RansacFailure(f"RANSAC: best hypothesis has {got} inliers (< {MIN_RANSAC_POINTS}) at threshold {threshold} px")
    mask = best_mask
    for _ in range(3):
        inl = corr.subset(np.flatnonzero(mask))
        t = epnp(inl, k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            t = refine(t, inl, k)
        new = reprojection_errors(t, corr, k) < threshold
        if new.sum() < MIN_RANSAC_POINTS or np.array_equal(new, mask):
            break
        mask = new
    return t, mask


def synthesize(points: np.ndarray, t: RigidTransform, k: Intrinsics, noise_px: float = 0.0,
               rng: np.random.Generator | None = None) -> Correspondences:
    """Oracle correspondences: project ``points`` with ``t`` and optionally add Gaussian pixel noise.

    Points behind the near plane or outside the image are dropped.
    """
    uv, z = project(t, np.asarray(points, dtype=np.float64).reshape(-1, 3), k)
    keep = (z > NEAR_PLANE) & (uv[:, 0] >= -0.5) & (uv[:, 0] < k.width - 0.5) \
        & (uv[:, 1] >= -0.5) & (uv[:, 1] < k.height - 0.5)
    uv = uv[keep]
    if noise_px > 0:
        if rng is None:
            raise ValueError("noise requires an explicit rng")
        uv = uv + rng.normal(0.0, noise_px, size=uv.shape)
    return Correspondences(np.asarray(points).reshape(-1, 3)[keep], uv)
