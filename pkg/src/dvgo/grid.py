"""Dense voxel grids aligned to a world-space box.

Grid points sit on cell corners and span the box inclusively, so point
``(i, j, k)`` lives at ``min + (i / (Nx - 1)) * Lx`` (and likewise for y, z).
Values are stored channel-major as an array of shape ``(C, Nx, Ny, Nz)``.
Queries outside the box are clamped onto its surface.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError, LoadError

MAGIC = b"DVGR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII6d")

# (dx, dy, dz) offsets of the 8 cell corners, x-major.
CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


@dataclass
class Bbox3:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.min)) and np.all(np.isfinite(self.max))):
            raise InvalidInputError("bbox coordinates must be finite")
        if np.any(self.max <= self.min):
            raise InvalidInputError(f"degenerate bbox: min={self.min}, max={self.max}")

    @property
    def lengths(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.min) & (points <= self.max), axis=-1)

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.min, self.max)

    def __eq__(self, other):
        if not isinstance(other, Bbox3):
            return NotImplemented
        return np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)


@dataclass
class DenseGrid:
    values: np.ndarray
    bbox: Bbox3
    lr_scale: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise InvalidInputError("grid values must have shape (C, Nx, Ny, Nz)")
        if min(self.values.shape[1:]) < 2:
            raise InvalidInputError(f"every axis needs at least 2 grid points, got {self.dims}")
        if self.lr_scale is not None:
            scale = np.asarray(self.lr_scale, dtype=np.float64)
            if scale.shape != self.dims:
                raise InvalidInputError("lr_scale needs one entry per grid point")
            if np.any(scale < 0) or np.any(scale > 1):
                raise InvalidInputError("lr_scale entries must lie in [0, 1]")
            self.lr_scale = scale

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[1:])

    @property
    def n_points(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def spacing(self) -> np.ndarray:
        """World distance between neighbouring grid points along each axis."""
        return self.bbox.lengths / (np.array(self.dims) - 1)

    def copy(self) -> "DenseGrid":
        scale = None if self.lr_scale is None else self.lr_scale.copy()
        return DenseGrid(self.values.copy(), Bbox3(self.bbox.min, self.bbox.max), scale)

    def point_positions(self) -> np.ndarray:
        """World positions of all grid points, shape ``(Nx, Ny, Nz, 3)``."""
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bbox.min, self.bbox.max, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_grid_coords(self, points: np.ndarray) -> np.ndarray:
        """Continuous grid coordinates of world points, clamped to the box."""
        points = self.bbox.clamp(np.asarray(points, dtype=np.float64))
        scale = (np.array(self.dims) - 1) / self.bbox.lengths
        g = (points - self.bbox.min) * scale
        return np.clip(g, 0.0, np.array(self.dims, dtype=np.float64) - 1, out=g)


def voxel_size(bbox: Bbox3, budget: int) -> float:
    return float(np.cbrt(np.prod(bbox.lengths) / budget))


def dims_for_budget(bbox: Bbox3, budget: int) -> tuple[int, int, int]:
    s = voxel_size(bbox, budget)
    # The 1e-9 nudge keeps exact ratios such as 1/0.5 from flooring to 1.
    dims = np.floor(bbox.lengths / s + 1e-9).astype(int)
    return tuple(int(n) for n in np.maximum(dims, 2))


def allocate(bbox: Bbox3, budget: int, channels: int = 1) -> DenseGrid:
    """Zero-initialized grid whose voxel size follows the expected voxel count."""
    if budget < 8:
        raise InvalidInputError("voxel budget must be at least 8")
    if channels < 1:
        raise InvalidInputError("channels must be positive")
    if not isinstance(bbox, Bbox3):
        bbox = Bbox3(*bbox)
    dims = dims_for_budget(bbox, budget)
    return DenseGrid(np.zeros((channels,) + dims), bbox)


def trilinear_weights(grid: DenseGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and blend weights for a batch of points.

    Returns ``(idx, w)``, both shaped ``(N, 8)``; ``idx`` indexes the
    flattened ``Nx*Ny*Nz`` lattice.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = grid.dims
    g = grid.to_grid_coords(points)
    i0 = np.minimum(g.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    f = g - i0
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offsets = (CORNERS[:, 0] * ny + CORNERS[:, 1]) * nz + CORNERS[:, 2]
    idx = base[:, None] + offsets[None, :]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    xy = [gx * gy, gx * fy, fx * gy, fx * fy]
    w = np.empty((len(points), 8))
    for k in range(4):
        w[:, 2 * k] = xy[k] * gz
        w[:, 2 * k + 1] = xy[k] * fz
    return idx, w


def gather(flat_values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Blend ``(C, V)`` lattice values at precomputed corners -> ``(N, C)``."""
    if flat_values.shape[0] == 1:
        return np.einsum("nk,nk->n", flat_values[0][idx], w)[:, None]
    return np.einsum("cnk,nk->nc", flat_values[:, idx], w)


def scatter(idx: np.ndarray, w: np.ndarray, upstream: np.ndarray, n_points: int) -> np.ndarray:
    """Adjoint of :func:`gather`: ``(N, C)`` upstream -> ``(C, V)`` gradient."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[:, None]
    flat_idx = idx.ravel()
    out = np.empty((upstream.shape[1], n_points))
    for c in range(upstream.shape[1]):
        out[c] = np.bincount(flat_idx, weights=(w * upstream[:, c:c + 1]).ravel(), minlength=n_points)
    return out


def trilinear_sample(grid: DenseGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation; a single point gives ``(C,)``, a batch ``(N, C)``."""
    points = np.asarray(points, dtype=np.float64)
    idx, w = trilinear_weights(grid, points)
    out = gather(grid.values.reshape(grid.channels, -1), idx, w)
    return out[0] if points.ndim == 1 else out


def trilinear_backward(grid: DenseGrid, points: np.ndarray, upstream: np.ndarray,
                       grad_out: np.ndarray) -> None:
    """Accumulate ``upstream`` through the interpolation weights into ``grad_out``."""
    if grad_out.shape != grid.values.shape:
        raise InvalidInputError(f"gradient buffer shape {grad_out.shape} != grid shape {grid.values.shape}")
    points = np.asarray(points, dtype=np.float64)
    idx, w = trilinear_weights(grid, points)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(idx.shape[0], grid.channels)
    grad_out.reshape(grid.channels, -1)[...] += scatter(idx, w, upstream, grid.n_points)


def nearest_sample(grid: DenseGrid, points: np.ndarray) -> np.ndarray:
    """Value of the nearest grid point; ties round toward the higher index."""
    points = np.asarray(points, dtype=np.float64)
    g = grid.to_grid_coords(points.reshape(-1, 3))
    i = np.minimum(np.floor(g + 0.5).astype(np.int64), np.array(grid.dims) - 1)
    out = grid.values[:, i[:, 0], i[:, 1], i[:, 2]].T
    return out[0] if points.ndim == 1 else out


def upsample(grid: DenseGrid, new_dims) -> DenseGrid:
    """Resample onto a denser lattice over the same box."""
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or any(n < o for n, o in zip(new_dims, grid.dims)):
        raise InvalidInputError(f"cannot shrink grid from {grid.dims} to {new_dims}")
    if new_dims == grid.dims:
        return grid.copy()
    target = DenseGrid(np.zeros((grid.channels,) + new_dims), grid.bbox)
    pts = target.point_positions().reshape(-1, 3)
    target.values = trilinear_sample(grid, pts).T.reshape((grid.channels,) + new_dims).copy()
    return target


def save_grid(grid: DenseGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(grid_to_bytes(grid))


def grid_to_bytes(grid: DenseGrid) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, grid.channels, *grid.dims, *grid.bbox.min, *grid.bbox.max)
    return header + grid.values.astype("<f4").tobytes(order="C")


def grid_from_bytes(data: bytes, source: str = "<bytes>") -> DenseGrid:
    if len(data) < _HEADER.size:
        raise LoadError(f"{source}: truncated grid header")
    magic, version, c, nx, ny, nz, *box = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise LoadError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise LoadError(f"{source}: unsupported grid version {version}")
    count = c * nx * ny * nz
    body = data[_HEADER.size:]
    if len(body) != 4 * count:
        raise LoadError(f"{source}: expected {count} values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(c, nx, ny, nz)
    return DenseGrid(values, Bbox3(box[:3], box[3:]))


def load_grid(path) -> DenseGrid:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read grid file {path}: {exc}") from exc
    return grid_from_bytes(data, str(path))
