"""Rays, point sampling, density activation and volume compositing.

Cameras follow the NeRF-synthetic convention: in camera space the camera
looks down -z with +x right and +y up, and image rows grow downward.

Two flavours of most operations live here: scalar helpers that mirror the
textbook definitions one ray at a time (used heavily in tests), and
flattened batch versions used by training. A batch stores every sample of
every ray in one array, ordered by ray, together with a ``ray_id`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .grid import DenseGrid, trilinear_sample

SOFTPLUS_LINEAR = 30.0


@dataclass
class Camera:
    c2w: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (3, 4):
            self.c2w = np.vstack([self.c2w, [0.0, 0.0, 0.0, 1.0]])
        if self.c2w.shape != (4, 4):
            raise InvalidInputError("c2w must be a 4x4 matrix")
        if not np.all(np.isfinite(self.c2w)):
            raise InvalidInputError("c2w must be finite")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise InvalidInputError("camera rotation is not orthonormal")
        if not np.allclose(self.c2w[3], [0, 0, 0, 1]):
            raise InvalidInputError("last row of c2w must be (0, 0, 0, 1)")
        if not (0 < self.near < self.far):
            raise InvalidInputError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.c2w[:3, 3]) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` and forward depth of world points."""
        p = self.world_to_camera(points)
        depth = -p[..., 2]
        safe = np.where(depth > 0, depth, 1.0)
        u = p[..., 0] / safe * self.fx + self.cx
        v = -p[..., 1] / safe * self.fy + self.cy
        return u, v, depth

    def frustum_corners(self) -> np.ndarray:
        """The 8 corners of the near and far image planes in world space."""
        corners = []
        for u, v in [(0, 0), (self.width, 0), (0, self.height), (self.width, self.height)]:
            d = self.rotation @ np.array([(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0])
            for depth in (self.near, self.far):
                corners.append(self.origin + depth * d)
        return np.array(corners)


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.dir, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(d)
        if not norm > 0:
            raise InvalidInputError("ray direction must be nonzero")
        self.dir = d / norm


@dataclass
class SampleBatch:
    points: np.ndarray
    deltas: np.ndarray
    alive_mask: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.alive_mask is None:
            self.alive_mask = np.ones(len(self.points), dtype=bool)
        if np.any(self.deltas <= 0):
            raise InvalidInputError("sample deltas must be positive")

    def __len__(self):
        return len(self.points)


@dataclass
class RenderResult:
    color: np.ndarray
    weights: np.ndarray
    bg_transmittance: float


# --------------------------------------------------------------------------
# rays and sampling
# --------------------------------------------------------------------------

def pixel_directions(camera: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit world directions through pixel coordinates (pixel centres at +0.5)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u + 0.5 - camera.cx) / camera.fx,
                      -(v + 0.5 - camera.cy) / camera.fy,
                      -np.ones_like(u)], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def make_rays(camera: Camera, pixel_set: Sequence[tuple[float, float]]) -> list[Ray]:
    pix = np.asarray(pixel_set, dtype=np.float64).reshape(-1, 2)
    bad = (pix[:, 0] < 0) | (pix[:, 0] >= camera.width) | (pix[:, 1] < 0) | (pix[:, 1] >= camera.height)
    if np.any(bad):
        raise InvalidInputError(f"pixel {tuple(pix[bad][0])} outside {camera.width}x{camera.height} image")
    dirs = pixel_directions(camera, pix[:, 0], pix[:, 1])
    return [Ray(camera.origin, d) for d in dirs]


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major, ``(H*W, 3)`` each."""
    v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = pixel_directions(camera, u.ravel(), v.ravel())
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def n_steps(near, far, step):
    """Number of stepped points after ``x_0`` so the last one reaches ``far``."""
    span = (np.asarray(far, dtype=np.float64) - near) / step
    return np.maximum(np.ceil(span - 1e-9), 1).astype(np.int64)


def sample_along_ray(ray: Ray, near: float, far: float, step: float) -> SampleBatch:
    if not (0 <= near < far) or step <= 0:
        raise InvalidInputError("need 0 <= near < far and step > 0")
    count = int(n_steps(near, far, step))
    t = near + step * np.arange(count + 1)
    points = ray.origin + t[:, None] * ray.dir
    return SampleBatch(points, np.full(count + 1, float(step)), t=t)


def jitter_samples(batch: SampleBatch, step: float, u: float) -> SampleBatch:
    """Rigidly shift every sample by ``u * step`` along the ray."""
    if not (0.0 <= u <= 1.0):
        raise InvalidInputError("jitter must lie in [0, 1]")
    if len(batch) < 2:
        raise InvalidInputError("need at least two samples to recover the ray direction")
    d = batch.points[1] - batch.points[0]
    d = d / np.linalg.norm(d)
    t = None if batch.t is None else batch.t + u * step
    return SampleBatch(batch.points + u * step * d, batch.deltas.copy(), batch.alive_mask.copy(), t)


@dataclass
class RayBatchSamples:
    """All samples of a batch of rays, flattened and grouped by ray."""
    points: np.ndarray
    t: np.ndarray
    ray_id: np.ndarray
    n_rays: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ray_id, minlength=self.n_rays)

    def select(self, mask: np.ndarray) -> "RayBatchSamples":
        return RayBatchSamples(self.points[mask], self.t[mask], self.ray_id[mask], self.n_rays)


def sample_rays(origins, dirs, near, far, step, jitter=None) -> RayBatchSamples:
    """Stepped samples for many rays; ``near``/``far``/``jitter`` may be per ray."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))
    counts = n_steps(near, far, step) + 1
    ray_id = np.repeat(np.arange(n), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(ray_id.size) - np.repeat(starts, counts)
    offset = k.astype(np.float64)
    if jitter is not None:
        offset = offset + np.broadcast_to(np.asarray(jitter, dtype=np.float64), (n,))[ray_id]
    t = near[ray_id] + offset * step
    points = origins[ray_id] + t[:, None] * dirs[ray_id]
    return RayBatchSamples(points, t, ray_id, n)


def ray_box_intersect(origins, dirs, bbox, near, far):
    """Slab test. Returns ``(hit, t_near, t_far)`` clipped to ``[near, far]``.

    Rays grazing the box count as hits. ``t_near`` stays at ``near`` when
    the first sample already lies inside the box.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bbox.min - origins) * inv
        t1 = (bbox.max - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # Axis-parallel rays outside the slab never hit.
    parallel = dirs == 0
    outside = parallel & ((origins < bbox.min) | (origins > bbox.max))
    lo = np.where(parallel & ~outside, -np.inf, lo)
    hi = np.where(parallel & ~outside, np.inf, hi)
    t_enter = np.max(lo, axis=-1)
    t_exit = np.min(hi, axis=-1)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), t_enter.shape)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), t_enter.shape)
    t_near = np.maximum(t_enter, near)
    t_far = np.minimum(t_exit, far)
    hit = (t_near <= t_far) & ~np.any(outside, axis=-1)
    return hit, t_near, t_far


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def softplus_shifted(raw, bias: float = 0.0):
    """``log(1 + exp(raw + bias))`` with linear/exponential guards at +/-30."""
    x = np.asarray(raw, dtype=np.float64) + bias
    mid = np.log1p(np.exp(np.clip(x, -SOFTPLUS_LINEAR, SOFTPLUS_LINEAR)))
    out = np.where(x > SOFTPLUS_LINEAR, x, np.where(x < -SOFTPLUS_LINEAR, np.exp(x), mid))
    return out if out.ndim else float(out)


def softplus_grad(raw, bias: float = 0.0):
    """Derivative of :func:`softplus_shifted` (the guards included)."""
    x = np.asarray(raw, dtype=np.float64) + bias
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = np.where(x > SOFTPLUS_LINEAR, 1.0, np.where(x < -SOFTPLUS_LINEAR, np.exp(x), sig))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def alpha_from_sigma(sigma, delta):
    out = -np.expm1(-np.asarray(sigma, dtype=np.float64) * delta)
    return out if out.ndim else float(out)


def alpha_grad(sigma, delta):
    """Derivative of :func:`alpha_from_sigma` with respect to ``sigma``."""
    out = delta * np.exp(-np.asarray(sigma, dtype=np.float64) * delta)
    return out if out.ndim else float(out)


def low_density_bias(alpha_init: float, voxel_size: float) -> float:
    """Softplus shift that makes a zero grid decay transmittance by ``1 - alpha_init`` per voxel."""
    if not (0.0 < alpha_init < 1.0):
        raise InvalidInputError("alpha_init must lie in (0, 1)")
    if voxel_size <= 0:
        raise InvalidInputError("voxel_size must be positive")
    return float(np.log(np.expm1(-np.log1p(-alpha_init) / voxel_size)))


def activated_alpha(grid: DenseGrid, points, delta: float, bias: float = 0.0, mode: str = "post"):
    """Opacity at ``points`` for the three interpolation/activation orderings."""
    if grid.channels != 1:
        raise InvalidInputError("activated_alpha needs a single-channel density grid")
    if mode == "post":
        raw = trilinear_sample(grid, points)[..., 0]
        return alpha_from_sigma(softplus_shifted(raw, bias), delta)
    if mode == "in":
        act = DenseGrid(softplus_shifted(grid.values, bias), grid.bbox)
        return alpha_from_sigma(trilinear_sample(act, points)[..., 0], delta)
    if mode == "pre":
        act = DenseGrid(alpha_from_sigma(softplus_shifted(grid.values, bias), delta), grid.bbox)
        out = trilinear_sample(act, points)[..., 0]
        return out if np.ndim(out) else float(out)
    raise InvalidInputError(f"unknown activation mode {mode!r}")


# --------------------------------------------------------------------------
# compositing
# --------------------------------------------------------------------------

def composite(alphas, colors, bg=(1.0, 1.0, 1.0)) -> RenderResult:
    """Alpha-composite one ray front to back over a background colour."""
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(alphas) != len(colors):
        raise InvalidInputError("alphas and colors differ in length")
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])
    weights = trans[:-1] * alphas
    color = weights @ colors + trans[-1] * np.asarray(bg, dtype=np.float64)
    return RenderResult(color, weights, float(trans[-1]))


def composite_backward(alphas, colors, bg, grad_color, grad_weights=None, grad_bg_transmittance=0.0):
    """Gradients of :func:`composite` w.r.t. ``alphas`` and ``colors``.

    Uses the back-to-front partial composite ``R_i`` (what the ray sees just
    behind sample ``i``) so no ``1 / (1 - alpha)`` division appears.
    """
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(grad_color, dtype=np.float64).reshape(3)
    k = len(alphas)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])
    gw = np.zeros(k) if grad_weights is None else np.asarray(grad_weights, dtype=np.float64).reshape(k)
    # Per-sample scalar "value" the weights multiply, and that of the background.
    value = colors @ g + gw
    behind = float(np.asarray(bg, dtype=np.float64) @ g + grad_bg_transmittance)
    d_alpha = np.empty(k)
    for i in range(k - 1, -1, -1):
        d_alpha[i] = trans[i] * (value[i] - behind)
        behind = alphas[i] * value[i] + (1.0 - alphas[i]) * behind
    d_colors = (trans[:-1] * alphas)[:, None] * g[None, :]
    return d_alpha, d_colors


@dataclass
class CompositeCache:
    trans: np.ndarray        # T_i per sample
    trans_after: np.ndarray  # T_{i+1} per sample
    weights: np.ndarray
    bg_trans: np.ndarray     # per ray


def _segment_cumsum(x, ray_id, n_rays):
    """Within-ray inclusive and exclusive cumulative sums, plus per-ray totals.

    Each ray is summed on its own row of a padded table; one running sum over
    the whole batch would lose precision to cancellation on long batches.
    """
    x = np.asarray(x, dtype=np.float64)
    counts = np.bincount(ray_id, minlength=n_rays)
    if x.size == 0:
        return x.copy(), x.copy(), np.zeros(n_rays)
    starts = np.cumsum(counts) - counts
    pos = np.arange(x.size) - starts[ray_id]
    table = np.zeros((n_rays, int(counts.max()) + 1))
    table[ray_id, pos + 1] = x
    np.cumsum(table, axis=1, out=table)
    incl = table[ray_id, pos + 1]
    excl = table[ray_id, pos]
    return incl, excl, table[np.arange(n_rays), counts]


def composite_rays(optical_depth, colors, ray_id, n_rays, bg):
    """Composite many rays from per-sample optical depth ``sigma * delta``.

    Returns ``(ray_colors (R, 3), cache)``. Samples must be grouped by ray in
    front-to-back order.
    """
    s = np.asarray(optical_depth, dtype=np.float64)
    incl, excl, totals = _segment_cumsum(s, ray_id, n_rays)
    trans_after = np.exp(-incl)
    trans = np.exp(-excl)
    weights = trans * -np.expm1(-s)
    bg_trans = np.exp(-totals)
    bg = np.asarray(bg, dtype=np.float64)
    rgb = np.empty((n_rays, 3))
    for c in range(3):
        rgb[:, c] = np.bincount(ray_id, weights=weights * colors[:, c], minlength=n_rays)
    rgb += bg_trans[:, None] * bg
    return rgb, CompositeCache(trans, trans_after, weights, bg_trans)


def composite_rays_backward(cache: CompositeCache, colors, ray_id, n_rays, bg, grad_rgb,
                            grad_weights=None, grad_bg_trans=None):
    """Adjoint of :func:`composite_rays`.

    Returns gradients w.r.t. optical depth ``(P,)`` and colours ``(P, 3)``.
    """
    g = np.asarray(grad_rgb, dtype=np.float64)
    value = np.einsum("pc,pc->p", colors, g[ray_id])
    if grad_weights is not None:
        value = value + grad_weights
    behind_bg = g @ np.asarray(bg, dtype=np.float64)
    if grad_bg_trans is not None:
        behind_bg = behind_bg + grad_bg_trans
    wv = cache.weights * value
    incl, _, totals = _segment_cumsum(wv, ray_id, n_rays)
    suffix = totals[ray_id] - incl + cache.bg_trans[ray_id] * behind_bg[ray_id]
    d_s = cache.trans_after * value - suffix
    d_colors = cache.weights[:, None] * g[ray_id]
    return d_s, d_colors
