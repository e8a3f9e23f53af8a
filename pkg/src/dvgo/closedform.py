"""Closed-form grid values for sharp linear surfaces, and a toy image fit.

In one dimension a cell holds two raw densities, ``a`` at ``x=0`` and ``b``
at ``x=1``. With post-activation (interpolate, then shifted softplus with
zero bias, then alpha with step ``delta``) the cell's alpha profile is

    S(x; a, b) = 1 - (1 + exp(a (1 - x) + b x)) ** (-delta)

and the target is the step ``T(x; c)`` that is 0 left of ``c`` and 1 right
of it. :func:`solve_1d` picks ``a`` at the largest value that keeps
``|S - T| <= eps`` outside ``[c - Delta, c + Delta]`` while pinning
``S(c) = 0.5``; ``b`` then follows linearly. Because both are affine in
``c``, solving the two edges of a 2D cell (or the top and bottom faces of a
3D cell) gives corner values whose bilinear blend is sharp on every
horizontal slice.

:func:`toy_image_fit` is the small 2D experiment comparing where the
nonlinearity sits relative to interpolation (``pre``, ``in`` or ``post``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .losses import Adam

MODES = ("pre", "in", "post")


@dataclass(frozen=True)
class SharpSurfaceSpec1D:
    c: float
    eps: float = 1e-4
    delta_tol: float = 1e-2
    delta_render: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise InvalidInputError("eps must lie in (0, 1)")
        if not self.delta_tol > 0:
            raise InvalidInputError("delta_tol must be positive")
        if not self.delta_render > 0:
            raise InvalidInputError("delta_render must be positive")
        if not np.isfinite(self.c):
            raise InvalidInputError("c must be finite")


@dataclass(frozen=True)
class GridCell2D:
    v_tl: float
    v_tr: float
    v_bl: float
    v_br: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.v_tl, self.v_tr, self.v_bl, self.v_br)

    def slice(self, t: float) -> tuple[float, float]:
        """``(a, b)`` on the horizontal line at height ``t`` (0 = top, 1 = bottom)."""
        return ((1 - t) * self.v_tl + t * self.v_bl, (1 - t) * self.v_tr + t * self.v_br)


def _logs(eps: float, delta: float) -> tuple[float, float, float]:
    half = np.log(2.0 ** (1.0 / delta) - 1.0)
    lo = np.log(eps ** (-1.0 / delta) - 1.0)
    hi = np.log((1.0 - eps) ** (-1.0 / delta) - 1.0)
    return float(half), float(lo), float(hi)


def solve_1d(spec: SharpSurfaceSpec1D) -> tuple[float, float]:
    """Grid values ``(a, b)`` whose post-activated profile approximates ``T(x; c)``.

    Works unchanged for ``c < 0`` and ``c > 1``, where the same expression
    turns from an upper into a lower bound on ``a``.
    """
    c, d = spec.c, spec.delta_tol
    if c == 0:
        raise InvalidInputError("c = 0 is singular: b is undefined")
    half, lo, hi = _logs(spec.eps, spec.delta_render)
    if spec.delta_render < 1:
        a = half * (c + d) / d - lo * c / d
    else:
        a = hi * c / d - half * (c - d) / d
    b = a * (c - 1) / c + half / c
    return float(a), float(b)


def upper_bounds_1d(spec: SharpSurfaceSpec1D) -> tuple[float, float]:
    """Both bounds on ``a``: from the right-side and the left-side condition."""
    c, d = spec.c, spec.delta_tol
    half, lo, hi = _logs(spec.eps, spec.delta_render)
    return half * (c + d) / d - lo * c / d, hi * c / d - half * (c - d) / d


def profile(x, a: float, b: float, delta: float) -> np.ndarray:
    """``S(x; a, b)``, evaluated without overflow for large ``|a|``, ``|b|``."""
    z = a * (1.0 - np.asarray(x, dtype=np.float64)) + b * np.asarray(x, dtype=np.float64)
    return -np.expm1(-delta * np.logaddexp(0.0, z))


def step_target(x, c: float, occupied: str = "right") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    right = (x >= c).astype(np.float64)
    return right if occupied == "right" else 1.0 - right


@dataclass
class VerifyReport:
    passed: bool
    max_error: float
    s_at_c: float
    monotone: bool
    failures: list = field(default_factory=list)


def verify_1d(a: float, b: float, spec: SharpSurfaceSpec1D, n_probe: int = 1001,
              occupied: str = "right") -> VerifyReport:
    """Check sharpness, the midpoint pin and monotonicity of ``S`` on ``[0, 1]``.

    ``occupied="left"`` checks the mirrored target (opaque for ``x < c``).
    """
    if n_probe < 3:
        raise InvalidInputError("n_probe must be at least 3")
    if occupied not in ("right", "left"):
        raise InvalidInputError("occupied must be 'right' or 'left'")
    c, d, delta = spec.c, spec.delta_tol, spec.delta_render
    x = np.linspace(0.0, 1.0, n_probe)
    edges = np.array([c - d, c + d])
    x = np.unique(np.concatenate([x, edges[(edges >= 0) & (edges <= 1)]]))
    s = profile(x, a, b, delta)
    outside = np.abs(x - c) >= d * (1 - 1e-12)
    err = np.abs(s - step_target(x, c, occupied))[outside]
    max_error = float(err.max()) if err.size else 0.0
    s_at_c = float(profile(c, a, b, delta))
    diffs = np.diff(s)
    monotone = bool(np.all(diffs >= -1e-12) if occupied == "right" else np.all(diffs <= 1e-12))
    failures = []
    # A relative slack absorbs rounding in the log/exp round trip.
    if max_error > spec.eps * (1 + 1e-8):
        failures.append(f"|S - T| reaches {max_error:.3g} > eps outside the band")
    if abs(s_at_c - 0.5) > 1e-9:
        failures.append(f"S(c) = {s_at_c!r}, expected 0.5")
    if not monotone:
        failures.append("S is not monotone")
    return VerifyReport(not failures, max_error, s_at_c, monotone, failures)


def solve_2d(c0: float, c1: float, eps: float = 1e-4, delta_top: float = 1e-2,
             delta_bottom: Optional[float] = None, delta_render: float = 0.5) -> GridCell2D:
    """Corner values for the boundary ``c(t) = (1 - t) c0 + t c1`` (left side free).

    ``c0`` is where the boundary crosses the top edge and ``c1`` the bottom
    edge; each edge may carry its own tolerance.
    """
    if not 0.0 < c0 < 1.0:
        raise InvalidInputError("the boundary must cross the top edge inside the cell (0 < c0 < 1)")
    delta_bottom = delta_top if delta_bottom is None else delta_bottom
    tl, tr = solve_1d(SharpSurfaceSpec1D(c0, eps, delta_top, delta_render))
    bl, br = solve_1d(SharpSurfaceSpec1D(c1, eps, delta_bottom, delta_render))
    return GridCell2D(tl, tr, bl, br)


def solve_3d(c_top: tuple[float, float], c_bottom: tuple[float, float], eps: float = 1e-4,
             delta_tol: float = 1e-2, delta_render: float = 0.5) -> np.ndarray:
    """Corner values for a planar surface crossing a 3D cell.

    ``c_top`` is ``(c(0, 0), c(1, 0))`` on the face ``u = 0`` and
    ``c_bottom`` is ``(c(0, 1), c(1, 1))`` on the face ``u = 1``. Returns an
    array indexed ``[u, t, x]``.
    """
    out = np.empty((2, 2, 2))
    for u, (c0, c1) in enumerate((c_top, c_bottom)):
        cell = solve_2d(c0, c1, eps, delta_tol, None, delta_render)
        out[u] = [[cell.v_tl, cell.v_tr], [cell.v_bl, cell.v_br]]
    return out


def slice_3d(corners: np.ndarray, t: float, u: float) -> tuple[float, float]:
    """``(a, b)`` on the line at ``(t, u)`` by bilinear blending of the corners."""
    w = np.array([[(1 - u) * (1 - t), (1 - u) * t], [u * (1 - t), u * t]])
    a = float(np.sum(w * corners[:, :, 0]))
    b = float(np.sum(w * corners[:, :, 1]))
    return a, b


def render_cell(cell: GridCell2D, size: int = 128, delta_render: float = 0.5) -> np.ndarray:
    """Post-activated alpha over a 2D cell, rows from top (t=0) to bottom."""
    t = np.linspace(0.0, 1.0, size)[:, None]
    x = np.linspace(0.0, 1.0, size)[None, :]
    a = (1 - t) * cell.v_tl + t * cell.v_bl
    b = (1 - t) * cell.v_tr + t * cell.v_br
    return profile(x, a, b, delta_render)


# --------------------------------------------------------------------------
# toy image fitting
# --------------------------------------------------------------------------

def half_plane(size: int, angle_deg: float, offset: float = 0.0) -> np.ndarray:
    """Binary image: 1 where the pixel centre lies on the positive side of a line."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5 - size / 2
    n = np.array([np.cos(np.radians(angle_deg)), np.sin(np.radians(angle_deg))])
    return (xx * n[0] + yy * n[1] > offset).astype(np.float64)


def disk(size: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5 - size / 2
    return (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)


def checkers(size: int, period: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx // period) + (yy // period)) % 2).astype(np.float64)


def standard_targets(size: int = 64) -> dict[str, np.ndarray]:
    return {
        "half_plane_10": half_plane(size, 10.0, 0.3),
        "half_plane_35": half_plane(size, 35.0, -1.7),
        "half_plane_70": half_plane(size, 70.0, 2.2),
        "disk": disk(size, size * 0.3),
    }


def _bilinear(shape, grid_shape):
    """Corner indices ``(P, 4)`` and weights for every pixel centre."""
    h, w = shape
    gh, gw = grid_shape
    ys = np.arange(h) * ((gh - 1) / max(h - 1, 1))
    xs = np.arange(w) * ((gw - 1) / max(w - 1, 1))
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    base = y0[:, None] * gw + x0[None, :]
    idx = np.stack([base, base + 1, base + gw, base + gw + 1], -1).reshape(-1, 4)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], -1).reshape(-1, 4)
    return idx, wts


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def toy_forward(values: np.ndarray, idx, wts, mode: str, delta: float = 1.0):
    """Predicted alpha per pixel and its Jacobian w.r.t. the four corner values."""
    v = values[idx]
    if mode == "post":
        z = np.sum(wts * v, axis=1)
        sp = _softplus(z)
        alpha = -np.expm1(-delta * sp)
        jac = (delta * np.exp(-delta * sp) * _sigmoid(z))[:, None] * wts
    elif mode == "in":
        s = np.sum(wts * _softplus(v), axis=1)
        alpha = -np.expm1(-delta * s)
        jac = (delta * np.exp(-delta * s))[:, None] * wts * _sigmoid(v)
    elif mode == "pre":
        sp = _softplus(v)
        alpha = np.sum(wts * -np.expm1(-delta * sp), axis=1)
        jac = wts * delta * np.exp(-delta * sp) * _sigmoid(v)
    else:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    return alpha, jac


def grid_shape_for(shape, stride: float) -> tuple[int, int]:
    h, w = shape
    if stride < 1:
        raise InvalidInputError("stride must be at least 1")
    if stride > max(h, w):
        raise InvalidInputError(f"stride {stride} exceeds the image size {h}x{w}")
    return max(2, int(np.ceil(h / stride))), max(2, int(np.ceil(w / stride)))


def toy_image_fit(target: np.ndarray, stride: float, mode: str, iters: int = 3000, seed: int = 0,
                  lr: float = 1.0, delta: float = 1.0) -> tuple[np.ndarray, float]:
    """Fit a coarse 2D grid to a binary image; returns ``(fitted, psnr)``.

    Grid nodes span the pixel centres inclusively, roughly ``stride`` pixels
    apart. Each pixel's prediction is an alpha value formed according to
    ``mode``, and the grid is trained with Adam on the per-pixel MSE.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2:
        raise InvalidInputError("target must be a 2D grayscale image")
    if not np.all((target == 0) | (target == 1)):
        raise InvalidInputError("target pixels must be 0 or 1")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    gshape = grid_shape_for(target.shape, stride)
    idx, wts = _bilinear(target.shape, gshape)
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 0.01, size=gshape[0] * gshape[1])
    flat = target.ravel()
    n = len(flat)
    optim = Adam({"v": lr})
    for _ in range(iters):
        alpha, jac = toy_forward(values, idx, wts, mode, delta)
        upstream = 2.0 * (alpha - flat) / n
        grad = np.bincount(idx.ravel(), weights=(jac * upstream[:, None]).ravel(), minlength=len(values))
        optim.step({"v": values}, {"v": grad})
    alpha, _ = toy_forward(values, idx, wts, mode, delta)
    fitted = alpha.reshape(target.shape)
    mse = float(np.mean((fitted - target) ** 2))
    return fitted, float(min(99.0, -10.0 * np.log10(max(mse, 1e-300))))
