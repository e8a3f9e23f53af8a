"""Datasets: NeRF-synthetic style loading/saving, analytic scenes, image metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.signal import convolve2d

from .errors import InvalidInputError, LoadError
from .render import Camera, camera_rays

PSNR_CAP = 99.0
DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0


@dataclass
class PosedImage:
    camera: Camera
    pixels: np.ndarray
    split: str = "train"
    alpha: Optional[np.ndarray] = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.camera.height, self.camera.width, 3):
            raise InvalidInputError(
                f"image {self.name or '?'} is {self.pixels.shape[:2]}, camera expects "
                f"{(self.camera.height, self.camera.width)}")


@dataclass
class Dataset:
    train: list
    test: list
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    white_bg: bool = True
    camera_angle_x: Optional[float] = None
    kind: Optional[str] = None

    def __post_init__(self):
        if not self.train:
            raise InvalidInputError("dataset needs at least one training view")
        for split in (self.train, self.test):
            if split and len({im.pixels.shape for im in split}) > 1:
                raise InvalidInputError("images within a split must share dimensions")

    @property
    def bg_color(self) -> np.ndarray:
        return np.ones(3) if self.white_bg else np.zeros(3)


# --------------------------------------------------------------------------
# PNG io
# --------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def composite_rgba(rgba: np.ndarray, bg) -> np.ndarray:
    if rgba.shape[-1] == 3:
        return rgba
    alpha = rgba[..., 3:4]
    return rgba[..., :3] * alpha + np.asarray(bg, dtype=np.float64) * (1.0 - alpha)


# --------------------------------------------------------------------------
# NeRF-synthetic transforms files
# --------------------------------------------------------------------------

def _load_split(root: Path, split: str, near, far, white_bg):
    path = root / f"transforms_{split}.json"
    if not path.exists():
        raise LoadError(f"missing transforms file: {path}")
    try:
        meta = json.loads(path.read_text())
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: malformed transforms file ({exc})") from exc
    near = meta.get("near", near) if near is None else near
    far = meta.get("far", far) if far is None else far
    bg = np.ones(3) if white_bg else np.zeros(3)
    images = []
    for i, frame in enumerate(frames):
        rel = frame.get("file_path")
        if rel is None:
            raise LoadError(f"{path}: frame {i} has no file_path")
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise LoadError(f"{path}: frame {i} references missing image {img_path}")
        rgba = read_png(img_path)
        h, w = rgba.shape[:2]
        mat = np.asarray(frame.get("transform_matrix"), dtype=np.float64)
        if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
            raise LoadError(f"{path}: frame {i} transform_matrix is not a finite 4x4 matrix")
        if abs(np.linalg.det(mat[:3, :3])) < 1e-6:
            raise LoadError(f"{path}: frame {i} has a non-invertible rotation")
        focal = 0.5 * w / math.tan(0.5 * angle)
        try:
            cam = Camera(mat, focal, focal, w / 2.0, h / 2.0, w, h,
                         float(near if near is not None else DEFAULT_NEAR),
                         float(far if far is not None else DEFAULT_FAR))
        except InvalidInputError as exc:
            raise LoadError(f"{path}: frame {i}: {exc}") from exc
        alpha = rgba[..., 3] if rgba.shape[-1] == 4 else None
        images.append(PosedImage(cam, composite_rgba(rgba, bg), split, alpha, name=str(rel)))
    return images, angle


def load_nerf_synthetic(root_dir, near=None, far=None, white_bg: bool = True) -> Dataset:
    """Load ``transforms_{train,test}.json`` plus referenced PNGs.

    ``near``/``far`` default to values stored in the transforms file, then
    to 2.0 / 6.0. RGBA images are composited onto the background colour.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise LoadError(f"dataset directory not found: {root}")
    train, angle = _load_split(root, "train", near, far, white_bg)
    test = []
    if (root / "transforms_test.json").exists():
        test, _ = _load_split(root, "test", near, far, white_bg)
    if not train:
        raise LoadError(f"{root}: no training frames")
    cam = train[0].camera
    return Dataset(train, test, cam.near, cam.far, white_bg, angle)


def save_nerf_synthetic(dataset: Dataset, root_dir) -> None:
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    for split, images in (("train", dataset.train), ("test", dataset.test)):
        if not images:
            continue
        cam0 = images[0].camera
        angle = dataset.camera_angle_x
        if angle is None:
            angle = 2.0 * math.atan(0.5 * cam0.width / cam0.fx)
        frames = []
        for i, im in enumerate(images):
            rel = f"./{split}/r_{i}"
            write_png(root / f"{rel}.png", im.pixels)
            frames.append({"file_path": rel, "transform_matrix": im.camera.c2w.tolist()})
        meta = {"camera_angle_x": angle, "near": dataset.near, "far": dataset.far, "frames": frames}
        if dataset.kind:
            meta["analytic_kind"] = dataset.kind
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# --------------------------------------------------------------------------
# analytic scenes
# --------------------------------------------------------------------------

ANALYTIC_KINDS = ("sphere", "boxes", "two_tone_sphere")
LIGHT_DIR = np.array([0.4, 0.5, 0.77]) / np.linalg.norm([0.4, 0.5, 0.77])
SPHERE_RADIUS = 1.0
BOXES = [  # (min, max, albedo)
    (np.array([-0.9, -0.9, -0.6]), np.array([0.1, 0.1, 0.4]), np.array([0.85, 0.25, 0.2])),
    (np.array([0.0, -0.2, -0.6]), np.array([0.8, 0.7, 0.1]), np.array([0.2, 0.6, 0.3])),
]
SPECULAR = 0.55
SHININESS = 6.0


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target`` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, cam_up, back, eye
    return c2w


def hemisphere_poses(n: int, rng: np.random.Generator, radius: float, stratified: bool):
    poses = []
    for i in range(n):
        if stratified:
            azim = 2 * np.pi * (i + rng.uniform(0.2, 0.8)) / n
            elev = np.deg2rad(10.0 + 60.0 * ((i * 0.618034) % 1.0))
        else:
            azim = rng.uniform(0, 2 * np.pi)
            elev = np.deg2rad(rng.uniform(15.0, 65.0))
        eye = radius * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
        poses.append(look_at(eye))
    return poses


def _shade(normal, view_dir, albedo, specular):
    lambert = np.maximum(normal @ LIGHT_DIR, 0.0)
    color = albedo * (0.3 + 0.7 * lambert[:, None])
    if specular:
        half = LIGHT_DIR - view_dir
        half /= np.linalg.norm(half, axis=-1, keepdims=True)
        color = color + SPECULAR * np.maximum(np.sum(normal * half, axis=-1), 0.0)[:, None] ** SHININESS
    return np.clip(color, 0.0, 1.0)


def _trace_sphere(origins, dirs, two_tone):
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - SPHERE_RADIUS ** 2
    disc = b * b - c
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0
    pos = origins + t[:, None] * dirs
    normal = pos / SPHERE_RADIUS
    if two_tone:
        albedo = np.where(pos[:, 2:3] > 0, [0.9, 0.4, 0.1], [0.15, 0.45, 0.85])
    else:
        albedo = np.broadcast_to([0.8, 0.3, 0.2], pos.shape)
    return hit, t, normal, albedo


def _trace_boxes(origins, dirs):
    best_t = np.full(len(origins), np.inf)
    normal = np.zeros_like(origins)
    albedo = np.zeros_like(origins)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for lo, hi, col in BOXES:
        with np.errstate(invalid="ignore"):
            t0 = (lo - origins) * inv
            t1 = (hi - origins) * inv
        tmin = np.minimum(t0, t1)
        t_enter = np.max(tmin, axis=-1)
        t_exit = np.min(np.maximum(t0, t1), axis=-1)
        hit = (t_enter <= t_exit) & (t_enter > 0) & (t_enter < best_t)
        axis = np.argmax(tmin, axis=-1)
        n = np.zeros_like(origins)
        n[np.arange(len(origins)), axis] = -np.sign(dirs[np.arange(len(origins)), axis])
        best_t = np.where(hit, t_enter, best_t)
        normal = np.where(hit[:, None], n, normal)
        albedo = np.where(hit[:, None], col, albedo)
    return np.isfinite(best_t), best_t, normal, albedo


def render_analytic(kind: str, camera: Camera, bg=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact ray-cast image of an analytic scene, ``(H, W, 3)``."""
    origins, dirs = camera_rays(camera)
    if kind == "boxes":
        hit, _, normal, albedo = _trace_boxes(origins, dirs)
    elif kind in ("sphere", "two_tone_sphere"):
        hit, _, normal, albedo = _trace_sphere(origins, dirs, kind == "two_tone_sphere")
    else:
        raise InvalidInputError(f"unknown analytic scene {kind!r}; choose from {ANALYTIC_KINDS}")
    color = _shade(normal, dirs, albedo, specular=kind == "two_tone_sphere")
    out = np.where(hit[:, None], color, np.asarray(bg, dtype=np.float64))
    return out.reshape(camera.height, camera.width, 3)


def generate_analytic_scene(kind: str = "two_tone_sphere", n_train: int = 20, n_test: int = 5,
                            image_size: int = 100, seed: int = 0, radius: float = 4.0,
                            near: float = 2.0, far: float = 6.0,
                            camera_angle_x: float = 0.6911112070083618) -> Dataset:
    """Inward-facing views of an analytic scene, rendered exactly."""
    if n_train < 1 or n_test < 1:
        raise InvalidInputError("need at least one train and one test view")
    if kind not in ANALYTIC_KINDS:
        raise InvalidInputError(f"unknown analytic scene {kind!r}; choose from {ANALYTIC_KINDS}")
    rng = np.random.default_rng(seed)
    focal = 0.5 * image_size / math.tan(0.5 * camera_angle_x)
    views = {}
    for split, n, strat in (("train", n_train, True), ("test", n_test, False)):
        views[split] = []
        for i, c2w in enumerate(hemisphere_poses(n, rng, radius, strat)):
            cam = Camera(c2w, focal, focal, image_size / 2.0, image_size / 2.0,
                         image_size, image_size, near, far)
            views[split].append(PosedImage(cam, render_analytic(kind, cam), split, name=f"{split}_{i}"))
    return Dataset(views["train"], views["test"], near, far, True, camera_angle_x, kind)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over valid windows, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < size:
        raise InvalidInputError(f"SSIM needs images of at least {size}x{size}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]

        def filt(img):
            return convolve2d(img, win, mode="valid")

        mu_x, mu_y = filt(x), filt(y)
        var_x = filt(x * x) - mu_x ** 2
        var_y = filt(y * y) - mu_y ** 2
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
