"""Two-stage optimization: coarse geometry search, then fine reconstruction.

The coarse stage fits a density grid and a diffuse colour grid inside the
box enclosing all training frustums. Its frozen density defines the known
free space, which both shrinks the fine stage's box and lets the fine stage
skip samples. The fine stage grows its grids progressively and decodes
colour with a small MLP.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, psnr, ssim
from .errors import InvalidInputError
from .grid import (CORNERS, Bbox3, DenseGrid, allocate, dims_for_budget, gather, scatter,
                   trilinear_weights, upsample, voxel_size)
from .losses import (Adam, LossWeights, background_entropy_loss, lr_factor, per_point_rgb_loss,
                     photometric_loss, view_count_scale)
from .render import (Camera, alpha_from_sigma, camera_rays, composite_rays, composite_rays_backward,
                     low_density_bias, ray_box_intersect, sample_rays, sigmoid, softplus_grad,
                     softplus_shifted)
from .scene import (CoarseScene, FineScene, init_mlp, mlp_backward, mlp_forward, mlp_input,
                    positional_encoding)

log = logging.getLogger(__name__)

# The colour MLP runs in single precision during training and rendering;
# the standalone query/gradient APIs stay in double precision.
MLP_DTYPE = np.float32

TRACE_FIELDS = ("iter", "total", "photo", "pt_rgb", "bg_entropy", "lr_factor", "seconds")


@dataclass
class TrainConfig:
    m_coarse: int = 100 ** 3
    m_fine: int = 160 ** 3
    alpha_init_coarse: float = 1e-6
    alpha_init_fine: float = 1e-2
    step_ratio: float = 0.5
    tau_coarse: float = 1e-3
    tau_fine: float = 1e-4
    coarse_iters: int = 10000
    fine_iters: int = 20000
    batch_rays: int = 8192
    pg_ckpt: tuple = (1000, 2000, 3000)
    lr_grid: float = 0.1
    lr_mlp: float = 1e-3
    lr_decay_steps: int = 20000
    weights_coarse: tuple = (1.0, 1e-1, 1e-2)
    weights_fine: tuple = (1.0, 1e-2, 1e-3)
    feat_dim: int = 12
    mlp_hidden: int = 128
    mlp_layers: int = 2
    k_x: int = 5
    k_d: int = 4
    seed: int = 0
    white_bg: bool = True
    low_density_init: bool = True
    view_count_lr: bool = True
    diffuse_only: bool = False
    threads: int = 1
    render_chunk: int = 4096

    def __post_init__(self):
        self.pg_ckpt = tuple(int(c) for c in self.pg_ckpt)
        self.weights_coarse = tuple(float(w) for w in self.weights_coarse)
        self.weights_fine = tuple(float(w) for w in self.weights_fine)
        for name in ("alpha_init_coarse", "alpha_init_fine"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidInputError(f"{name} must lie in (0, 1)")
        # A zero threshold disables that skipping rule.
        for name in ("tau_coarse", "tau_fine"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1)")
        if self.coarse_iters < 0 or self.fine_iters < 0:
            raise InvalidInputError("iteration counts must be nonnegative")
        if list(self.pg_ckpt) != sorted(self.pg_ckpt):
            raise InvalidInputError("pg_ckpt must be sorted ascending")
        if self.pg_ckpt and self.fine_iters and self.pg_ckpt[-1] >= self.fine_iters:
            raise InvalidInputError("every pg_ckpt must precede the last fine iteration")
        if self.m_coarse < 8 or self.m_fine < 8:
            raise InvalidInputError("voxel budgets must be at least 8")
        if self.step_ratio <= 0 or self.batch_rays < 1 or self.threads < 1:
            raise InvalidInputError("step_ratio, batch_rays and threads must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("pg_ckpt", "weights_coarse", "weights_fine"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        # YAML 1.1 reads "1e-6" (no decimal point) as a string.
        for f in dataclasses.fields(cls):
            if f.type in ("float", float) and isinstance(data.get(f.name), str):
                try:
                    data[f.name] = float(data[f.name])
                except ValueError as exc:
                    raise InvalidInputError(f"{f.name} must be a number") from exc
        return cls(**data)


@dataclass
class FreeSpaceMask:
    """Known free space: where the frozen coarse density's alpha is below ``tau``."""
    coarse: CoarseScene
    tau: float

    def alpha(self, points) -> np.ndarray:
        idx, w = trilinear_weights(self.coarse.density, points)
        raw = gather(self.coarse.density.values.reshape(1, -1), idx, w)[:, 0]
        return alpha_from_sigma(softplus_shifted(raw, self.coarse.bias), self.coarse.step)

    def unknown(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.tau <= 0:
            return np.ones(len(points), dtype=bool)
        # Interpolated raw density never exceeds the largest corner value and
        # alpha grows with raw density, so a cell whose largest corner stays
        # below tau is free everywhere; only the remaining points need the
        # exact test.
        grid = self.coarse.density
        g = grid.to_grid_coords(points)
        i0 = np.minimum(g.astype(np.int64), np.array(grid.dims) - 2)
        maybe = self._maybe_occupied()[i0[:, 0], i0[:, 1], i0[:, 2]]
        out = np.zeros(len(points), dtype=bool)
        out[maybe] = self.alpha(points[maybe]) >= self.tau
        return out

    def _maybe_occupied(self) -> np.ndarray:
        cached = getattr(self, "_cells", None)
        if cached is None or cached[0] is not self.coarse.density.values:
            v = self.coarse.density.values[0]
            hi = v[:-1, :-1, :-1]
            for dx, dy, dz in CORNERS[1:]:
                hi = np.maximum(hi, v[dx:v.shape[0] - 1 + dx, dy:v.shape[1] - 1 + dy, dz:v.shape[2] - 1 + dz])
            alpha = alpha_from_sigma(softplus_shifted(hi, self.coarse.bias), self.coarse.step)
            cached = (self.coarse.density.values, alpha >= self.tau)
            self._cells = cached
        return cached[1]


@dataclass
class TrainResult:
    scene: object
    trace: list = field(default_factory=list)


def coarse_bbox(cameras: Sequence[Camera]) -> Bbox3:
    """Axis-aligned box around the near/far frustum corners of all cameras."""
    if not cameras:
        raise InvalidInputError("need at least one camera")
    corners = np.concatenate([cam.frustum_corners() for cam in cameras])
    return Bbox3(corners.min(axis=0), corners.max(axis=0))


def fine_bbox(mask: FreeSpaceMask) -> Bbox3:
    """Box around the unknown space, probed at twice the coarse resolution."""
    grid = mask.coarse.density
    probe_dims = tuple(2 * (n - 1) + 1 for n in grid.dims)
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(grid.bbox.min, grid.bbox.max, probe_dims)]
    occupied = (mask.alpha(np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3))
                >= max(mask.tau, 0.0)).reshape(probe_dims)
    if mask.tau <= 0 or not occupied.any():
        if mask.tau > 0:
            log.warning("no occupied probe found; falling back to the coarse bbox")
        return Bbox3(grid.bbox.min, grid.bbox.max)
    lo, hi = [], []
    for axis, coords in enumerate(axes):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(occupied.any(axis=other))
        lo.append(coords[hit[0]])
        hi.append(coords[hit[-1]])
    pad = grid.spacing
    return Bbox3(np.maximum(np.array(lo) - pad, grid.bbox.min), np.minimum(np.array(hi) + pad, grid.bbox.max))


# --------------------------------------------------------------------------
# batched forward / backward through a scene
# --------------------------------------------------------------------------

@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    target: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.origins)

    def take(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
                        None if self.target is None else self.target[idx])


def _scene_forward(scene, rays: RayBatch, bg, mask: Optional[FreeSpaceMask] = None,
                   tau_fine: float = 0.0, jitter=None):
    """Sample, skip, query and composite. Returns ``(rgb, ctx)``."""
    samples = sample_rays(rays.origins, rays.dirs, rays.near, rays.far, scene.step, jitter)
    if mask is not None and mask.tau > 0:
        samples = samples.select(mask.unknown(samples.points))
    grid = scene.density
    idx, w = trilinear_weights(grid, samples.points)
    raw = gather(grid.values.reshape(1, -1), idx, w)[:, 0]
    sigma = softplus_shifted(raw, scene.bias)
    if tau_fine > 0:
        keep = alpha_from_sigma(sigma, scene.step) >= tau_fine
        samples = samples.select(keep)
        idx, w, raw, sigma = idx[keep], w[keep], raw[keep], sigma[keep]
    ctx = {"samples": samples, "idx": idx, "w": w, "raw": raw}
    if isinstance(scene, CoarseScene):
        colors = sigmoid(gather(scene.rgb.values.reshape(3, -1), idx, w))
    elif scene.mlp is None:
        colors = sigmoid(gather(scene.feat.values.reshape(3, -1), idx, w))
    else:
        feat = gather(scene.feat.values.reshape(scene.feat.channels, -1), idx, w)
        enc_d = positional_encoding(rays.dirs.astype(MLP_DTYPE), scene.k_d)[samples.ray_id]
        x_in = mlp_input(feat.astype(MLP_DTYPE), samples.points.astype(MLP_DTYPE), None,
                         scene.k_x, scene.k_d, enc_d)
        colors, ctx["mlp"] = mlp_forward(scene.mlp, x_in)
    rgb, cache = composite_rays(sigma * scene.step, colors, samples.ray_id, len(rays), bg)
    ctx.update(colors=colors, cache=cache)
    return rgb, ctx


def _loss_and_grads(scene, rays: RayBatch, bg, weights: LossWeights, scale: float,
                    mask=None, tau_fine=0.0, jitter=None):
    """Loss terms and parameter gradients for one chunk of rays.

    ``scale`` rescales the chunk's ray-averaged losses so that chunks of a
    batch sum to the batch average.
    """
    rgb, ctx = _scene_forward(scene, rays, bg, mask, tau_fine, jitter)
    samples, cache, colors = ctx["samples"], ctx["cache"], ctx["colors"]
    n = len(rays)
    photo, d_rgb = photometric_loss(rgb, rays.target)
    pt, d_w, d_c = per_point_rgb_loss(cache.weights, colors, rays.target, samples.ray_id, n)
    ent, d_bg = background_entropy_loss(cache.bg_trans)
    d_s, d_colors = composite_rays_backward(
        cache, colors, samples.ray_id, n, bg, weights.w_photo * scale * d_rgb,
        weights.w_pt_rgb * scale * d_w, weights.w_bg * scale * d_bg)
    d_colors += weights.w_pt_rgb * scale * d_c
    d_raw = d_s * scene.step * softplus_grad(ctx["raw"], scene.bias)
    idx, w = ctx["idx"], ctx["w"]
    grid = scene.density
    grads = {"density": scatter(idx, w, d_raw[:, None], grid.n_points).reshape(grid.values.shape)}
    if isinstance(scene, CoarseScene) or scene.mlp is None:
        name = "rgb" if isinstance(scene, CoarseScene) else "feat"
        target = scene.rgb if name == "rgb" else scene.feat
        d_logit = d_colors * colors * (1.0 - colors)
        grads[name] = scatter(idx, w, d_logit, grid.n_points).reshape(target.values.shape)
    else:
        gw, gb, g_in = mlp_backward(scene.mlp, ctx["mlp"], d_colors, input_cols=scene.feat.channels)
        for i, (a, b) in enumerate(zip(gw, gb)):
            grads[f"mlp.w{i}"] = a
            grads[f"mlp.b{i}"] = b
        grads["feat"] = scatter(idx, w, g_in, grid.n_points).reshape(scene.feat.values.shape)
    terms = np.array([photo, pt, ent]) * scale
    return terms, grads


def batch_loss_and_grads(scene, rays: RayBatch, bg, weights: LossWeights, mask=None,
                         tau_fine=0.0, jitter=None, threads: int = 1):
    """Weighted loss terms ``(photo, pt_rgb, bg)`` and summed gradients over a ray batch.

    With ``threads > 1`` the batch is split into contiguous chunks processed
    concurrently, each with its own gradient buffers; buffers are summed in
    chunk order afterwards.
    """
    n = len(rays)
    n_chunks = max(1, min(threads, n))
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)

    def run(k):
        sl = slice(bounds[k], bounds[k + 1])
        jit = None if jitter is None else jitter[sl]
        return _loss_and_grads(scene, rays.take(sl), bg, weights, (sl.stop - sl.start) / n,
                               mask, tau_fine, jit)

    if n_chunks == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            results = list(pool.map(run, range(n_chunks)))
    terms = sum(r[0] for r in results)
    grads = dict(results[0][1])
    for _, g in results[1:]:
        for name, value in g.items():
            grads[name] = grads[name] + value
    return terms, grads


def render_rays(scene, rays: RayBatch, bg, mask=None, tau_fine=0.0, chunk: int = 4096,
                threads: int = 1) -> np.ndarray:
    """Deterministic colours for every ray (no jitter), in chunks of ``chunk`` rays."""
    out = np.empty((len(rays), 3))
    starts = range(0, len(rays), chunk)

    def run(start):
        sl = slice(start, start + chunk)
        out[sl], _ = _scene_forward(scene, rays.take(sl), bg, mask, tau_fine)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)
    return out


# --------------------------------------------------------------------------
# ray pools
# --------------------------------------------------------------------------

def dataset_rays(images) -> RayBatch:
    origins, dirs, near, far, target = [], [], [], [], []
    for im in images:
        o, d = camera_rays(im.camera)
        origins.append(o)
        dirs.append(d)
        near.append(np.full(len(o), im.camera.near))
        far.append(np.full(len(o), im.camera.far))
        target.append(im.pixels.reshape(-1, 3))
    return RayBatch(*(np.concatenate(a) for a in (origins, dirs, near, far, target)))


def clip_rays_to_box(rays: RayBatch, bbox: Bbox3) -> tuple[RayBatch, np.ndarray]:
    """Drop rays missing ``bbox`` and tighten the rest to the intersection."""
    hit, t_near, t_far = ray_box_intersect(rays.origins, rays.dirs, bbox, rays.near, rays.far)
    hit &= t_far > t_near
    clipped = RayBatch(rays.origins[hit], rays.dirs[hit], t_near[hit], t_far[hit],
                       None if rays.target is None else rays.target[hit])
    return clipped, hit


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _iterate(scene, pool: RayBatch, optim: Adam, cfg: TrainConfig, weights: LossWeights, n_iters: int,
             rng, bg, mask=None, tau_fine=0.0, on_step=None, stage="coarse"):
    trace = []
    start = time.perf_counter()
    for it in range(n_iters):
        if on_step is not None:
            on_step(it)
        sel = rng.integers(0, len(pool), size=cfg.batch_rays)
        jitter = rng.uniform(0.0, 1.0, size=cfg.batch_rays)
        terms, grads = batch_loss_and_grads(scene, pool.take(sel), bg, weights, mask, tau_fine,
                                            jitter, cfg.threads)
        factor = lr_factor(it, cfg.lr_decay_steps)
        optim.step(scene.params(), grads, factor)
        weighted = terms * np.array([weights.w_photo, weights.w_pt_rgb, weights.w_bg])
        trace.append({"iter": it, "total": float(weighted.sum()), "photo": float(terms[0]),
                      "pt_rgb": float(terms[1]), "bg_entropy": float(terms[2]),
                      "lr_factor": factor, "seconds": time.perf_counter() - start})
        if it % 500 == 0 or it == n_iters - 1:
            log.info("%s iter %d  loss %.5f  psnr %.2f", stage, it, weighted.sum(),
                     -10 * np.log10(max(terms[0], 1e-12)))
    return trace


def init_coarse(dataset: Dataset, cfg: TrainConfig) -> CoarseScene:
    cams = [im.camera for im in dataset.train]
    box = coarse_bbox(cams)
    density = allocate(box, cfg.m_coarse, 1)
    s = voxel_size(box, cfg.m_coarse)
    bias = low_density_bias(cfg.alpha_init_coarse, s) if cfg.low_density_init else 0.0
    if cfg.view_count_lr:
        density.lr_scale = view_count_scale(density, cams)
    return CoarseScene(density, DenseGrid(np.zeros((3,) + density.dims), box), bias, cfg.step_ratio * s)


def train_coarse(dataset: Dataset, cfg: TrainConfig, rng=None) -> TrainResult:
    if len(dataset.train) < 2:
        raise InvalidInputError("coarse training needs at least two training views")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    scene = init_coarse(dataset, cfg)
    log.info("coarse grid %s, voxel %.4f, bias %.4f", scene.density.dims,
             scene.step / cfg.step_ratio, scene.bias)
    optim = Adam({"density": cfg.lr_grid, "rgb": cfg.lr_grid})
    if scene.density.lr_scale is not None:
        optim.scales["density"] = scene.density.lr_scale[None]
    trace = _iterate(scene, dataset_rays(dataset.train), optim, cfg, LossWeights(*cfg.weights_coarse),
                     cfg.coarse_iters, rng, dataset.bg_color, stage="coarse")
    scene.density.values.setflags(write=False)
    return TrainResult(scene, trace)


def fine_budgets(cfg: TrainConfig) -> list[int]:
    """Voxel budget before the first checkpoint and after each one."""
    initial = cfg.m_fine // 2 ** len(cfg.pg_ckpt)
    return [initial * 2 ** k for k in range(len(cfg.pg_ckpt) + 1)]


def init_fine(box: Bbox3, cfg: TrainConfig, rng) -> FineScene:
    budget = fine_budgets(cfg)[0]
    density = allocate(box, budget, 1)
    s = voxel_size(box, budget)
    bias = low_density_bias(cfg.alpha_init_fine, s)
    if cfg.diffuse_only:
        return FineScene(density, DenseGrid(np.zeros((3,) + density.dims), box), None, bias,
                         cfg.step_ratio * s, cfg.k_x, cfg.k_d)
    feat = DenseGrid(np.zeros((cfg.feat_dim,) + density.dims), box)
    in_dim = cfg.feat_dim + 6 + 6 * (cfg.k_x + cfg.k_d)
    mlp = init_mlp(in_dim, cfg.mlp_hidden, cfg.mlp_layers, 3, rng)
    return FineScene(density, feat, mlp, bias, cfg.step_ratio * s, cfg.k_x, cfg.k_d)


def rescale_fine(scene: FineScene, budget: int, step_ratio: float) -> None:
    """Resize the fine grids to a new voxel budget by trilinear resampling."""
    box = scene.density.bbox
    dims = dims_for_budget(box, budget)
    dims = tuple(max(n, o) for n, o in zip(dims, scene.density.dims))
    scene.density = upsample(scene.density, dims)
    scene.feat = upsample(scene.feat, dims)
    scene.step = step_ratio * voxel_size(box, budget)


def train_fine(dataset: Dataset, coarse: CoarseScene, cfg: TrainConfig, rng=None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    mask = FreeSpaceMask(coarse, cfg.tau_coarse)
    box = fine_bbox(mask)
    scene = init_fine(box, cfg, rng)
    log.info("fine bbox %s..%s, grid %s", np.round(box.min, 3), np.round(box.max, 3), scene.density.dims)
    pool, _ = clip_rays_to_box(dataset_rays(dataset.train), box)
    lrs = {"density": cfg.lr_grid, "feat": cfg.lr_grid}
    if scene.mlp is not None:
        lrs.update({name: cfg.lr_mlp for name in scene.mlp.arrays()})
    optim = Adam(lrs)
    budgets = fine_budgets(cfg)

    def on_step(it):
        if it in cfg.pg_ckpt:
            k = cfg.pg_ckpt.index(it) + 1
            rescale_fine(scene, budgets[k], cfg.step_ratio)
            optim.reset("density")
            optim.reset("feat")
            log.info("fine grid rescaled to %s at iter %d", scene.density.dims, it)

    trace = _iterate(scene, pool, optim, cfg, LossWeights(*cfg.weights_fine), cfg.fine_iters, rng,
                     dataset.bg_color, mask, cfg.tau_fine, on_step, stage="fine")
    return TrainResult(scene, trace)


def render_view(scene, camera: Camera, mask: Optional[FreeSpaceMask] = None, bg=(1.0, 1.0, 1.0),
                tau_fine: float = 0.0, chunk: int = 4096, threads: int = 1) -> np.ndarray:
    """Deterministic full-image render; rays missing the scene box show ``bg``."""
    o, d = camera_rays(camera)
    rays = RayBatch(o, d, np.full(len(o), camera.near), np.full(len(o), camera.far))
    out = np.broadcast_to(np.asarray(bg, dtype=np.float64), (len(o), 3)).copy()
    clipped, hit = clip_rays_to_box(rays, scene.density.bbox)
    if len(clipped):
        out[hit] = render_rays(scene, clipped, bg, mask, tau_fine, chunk, threads)
    return out.reshape(camera.height, camera.width, 3)


def evaluate(scene, images, mask=None, bg=(1.0, 1.0, 1.0), tau_fine: float = 0.0, threads: int = 1):
    """Render every image; returns ``(renders, [(psnr, ssim), ...])``."""
    renders, metrics = [], []
    for im in images:
        img = render_view(scene, im.camera, mask, bg, tau_fine, threads=threads)
        renders.append(img)
        metrics.append((psnr(img, im.pixels), ssim(img, im.pixels)))
    return renders, metrics


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (row[k] if k == "iter" else repr(float(row[k]))) for k in TRACE_FIELDS})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None):
    """Run both stages; optionally write config, checkpoints and loss traces to ``out_dir``."""
    from .scene import save_scene

    rng = np.random.default_rng(cfg.seed)
    coarse = train_coarse(dataset, cfg, rng)
    fine = train_fine(dataset, coarse.scene, cfg, rng)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        save_scene(coarse.scene, out / "coarse.ckpt")
        save_scene(fine.scene, out / "fine.ckpt")
        write_trace(out / "loss_coarse.csv", coarse.trace)
        write_trace(out / "loss_fine.csv", fine.trace)
    return coarse, fine
