"""Training losses, Adam with per-voxel learning-rate scaling, and view counts.

Every loss returns ``(value, grads...)`` so callers can chain the reverse
pass by hand. Batched losses average over rays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

log = logging.getLogger(__name__)

ENTROPY_CLAMP = 1e-6
WEIGHT_NORM_EPS = 1e-9


@dataclass
class LossWeights:
    w_photo: float = 1.0
    w_pt_rgb: float = 1e-1
    w_bg: float = 1e-2

    def __post_init__(self):
        for name in ("w_photo", "w_pt_rgb", "w_bg"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and nonnegative")

    @classmethod
    def coarse(cls) -> "LossWeights":
        return cls(1.0, 1e-1, 1e-2)

    @classmethod
    def fine(cls) -> "LossWeights":
        return cls(1.0, 1e-2, 1e-3)


def photometric_loss(pred, target):
    """Mean over rays of squared RGB distance. Returns ``(loss, d_pred)``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0:
        raise InvalidInputError("photometric loss needs at least one ray")
    if pred.shape != target.shape:
        raise InvalidInputError("prediction and target batches differ in size")
    diff = pred - target
    n = len(pred)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def per_point_rgb_loss(weights, colors, target, ray_id=None, n_rays: Optional[int] = None):
    """Weight-normalized squared error of every sample colour against its ray's target.

    Per ray: ``sum_i w_i |c_i - target|^2 / max(sum_i w_i, 1e-9)``, then
    averaged over rays. With ``ray_id`` omitted all samples belong to one
    ray and ``target`` is a single RGB triple. Returns
    ``(loss, d_weights, d_colors)``.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if ray_id is None:
        ray_id = np.zeros(len(weights), dtype=np.int64)
        n_rays = 1
    elif n_rays is None:
        n_rays = len(target)
    diff = colors - target[ray_id]
    err = np.sum(diff * diff, axis=-1)
    total_w = np.bincount(ray_id, weights=weights, minlength=n_rays)
    norm = np.maximum(total_w, WEIGHT_NORM_EPS)
    per_ray = np.bincount(ray_id, weights=weights * err, minlength=n_rays) / norm
    active = (total_w > WEIGHT_NORM_EPS)[ray_id]
    d_w = (err - np.where(active, per_ray[ray_id], 0.0)) / norm[ray_id] / n_rays
    d_c = 2.0 * (weights / norm[ray_id] / n_rays)[:, None] * diff
    return float(per_ray.mean()), d_w, d_c


def background_entropy_loss(bg_trans):
    """Mean binary entropy of the background transmittance. Returns ``(loss, d_bg)``."""
    p_raw = np.asarray(bg_trans, dtype=np.float64)
    scalar = p_raw.ndim == 0
    p_raw = p_raw.reshape(-1)
    p = np.clip(p_raw, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    h = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    inside = (p_raw > ENTROPY_CLAMP) & (p_raw < 1.0 - ENTROPY_CLAMP)
    grad = np.where(inside, np.log1p(-p) - np.log(p), 0.0) / len(p)
    if scalar:
        return float(h[0]), float(grad[0])
    return float(h.mean()), grad


def lr_factor(step: int, decay_steps: int = 20000) -> float:
    """Continuous exponential decay reaching 0.1 after ``decay_steps``."""
    return float(0.1 ** (step / decay_steps))


class Adam:
    """Adam over named arrays, updated in place.

    ``base_lr`` maps parameter names to learning rates; ``scales`` holds
    optional per-element multipliers (e.g. per-voxel view-count scales)
    that broadcast against the parameter.
    """

    def __init__(self, base_lr: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.base_lr = dict(base_lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.scales: dict[str, np.ndarray] = {}

    def reset(self, name: str) -> None:
        """Forget the moments of one parameter (after it was resized)."""
        self.m.pop(name, None)
        self.v.pop(name, None)

    def step(self, params: dict, grads: dict, lr_factor: float = 1.0) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise InvalidInputError(f"{name}: gradient {g.shape} != parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.base_lr[name] * lr_factor / bc1
            update = m / (np.sqrt(v / bc2) + self.eps)
            scale = self.scales.get(name)
            if scale is not None:
                update *= scale
            p -= lr * update


def adam_step(state: Adam, params: dict, grads: dict, lr_factor: float = 1.0,
              per_param_scale: Optional[dict] = None) -> None:
    if per_param_scale:
        state.scales.update(per_param_scale)
    state.step(params, grads, lr_factor)


def view_counts(points: np.ndarray, cameras: Sequence) -> np.ndarray:
    """Number of camera frustums (near..far, inside the image) containing each point."""
    points = np.asarray(points, dtype=np.float64)
    counts = np.zeros(points.shape[:-1], dtype=np.int64)
    for cam in cameras:
        u, v, depth = cam.project(points)
        inside = (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
        inside &= (depth >= cam.near) & (depth <= cam.far)
        counts += inside
    return counts


def view_count_scale(grid, cameras: Sequence) -> np.ndarray:
    """Per-grid-point learning-rate scale ``n_j / n_max``."""
    if not cameras:
        raise InvalidInputError("need at least one camera")
    counts = view_counts(grid.point_positions(), cameras)
    n_max = counts.max()
    if n_max == 0:
        log.warning("no grid point is visible from any camera; using unit learning-rate scales")
        return np.ones(grid.dims)
    return counts / n_max
