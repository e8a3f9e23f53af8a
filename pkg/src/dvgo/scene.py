"""Coarse and fine scene representations.

The coarse scene holds a density grid and a view-invariant colour grid
(stored as logits, squashed with a sigmoid on query). The fine scene holds a
density grid plus a feature grid decoded by a small MLP that also sees the
positionally-encoded point and viewing direction. Setting ``mlp=None`` on a
fine scene turns its 3-channel feature grid into a diffuse colour grid,
which is how the diffuse-only ablation is expressed.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError, LoadError
from .grid import DenseGrid, grid_from_bytes, grid_to_bytes, trilinear_sample
from .render import sigmoid


def positional_encoding(v, k: int) -> np.ndarray:
    """``[v, sin(v), cos(v), sin(2v), cos(2v), ..., sin(2^(k-1) v), cos(2^(k-1) v)]``.

    Floating inputs keep their precision; anything else is promoted to float64.
    """
    v = np.asarray(v)
    if v.dtype not in (np.float32, np.float64):
        v = v.astype(np.float64)
    parts = [v]
    for j in range(k):
        scaled = v * v.dtype.type(2.0 ** j)
        parts += [np.sin(scaled), np.cos(scaled)]
    return np.concatenate(parts, axis=-1)


def encoding_size(k: int) -> int:
    return 3 + 6 * k


@dataclass
class MlpParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need matching, nonempty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InvalidInputError(f"layer {i} input {w.shape[0]} != previous output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"mlp.w{i}"] = w
            out[f"mlp.b{i}"] = b
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(in_dim: int, hidden: int = 128, n_hidden: int = 2, out_dim: int = 3,
             rng: Optional[np.random.Generator] = None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = [in_dim] + [hidden] * n_hidden + [out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """ReLU hidden layers, sigmoid output. Returns ``(out, cache)``."""
    x = np.asarray(x)
    if x.shape[-1] != params.in_dim:
        raise InvalidInputError(f"MLP expects {params.in_dim} inputs, got {x.shape[-1]}")
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False)
        if i < last:
            np.maximum(h, 0, out=h)
        acts.append(h)
    out = sigmoid(h)
    return out, (acts, out)


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray, input_cols: Optional[int] = None):
    """Returns ``(grad_weights, grad_biases, grad_input)``.

    With ``input_cols`` only the gradient of the first ``input_cols`` inputs
    is formed, which saves work when the rest are constants.
    """
    acts, out = cache
    grad_out = np.asarray(grad_out, dtype=out.dtype)
    if grad_out.shape != out.shape:
        raise InvalidInputError(f"upstream shape {grad_out.shape} != output shape {out.shape}")
    g = grad_out * out * (1.0 - out)
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        w = params.weights[i]
        if i == 0 and input_cols is not None:
            w = w[:input_cols]
        g = g @ w.astype(g.dtype, copy=False).T
        if i > 0:
            g *= acts[i] > 0
    return gw, gb, g


@dataclass
class CoarseScene:
    density: DenseGrid
    rgb: DenseGrid
    bias: float
    step: float

    def __post_init__(self):
        if self.density.channels != 1 or self.rgb.channels != 3:
            raise InvalidInputError("coarse scene needs a 1-channel density and 3-channel rgb grid")
        if self.density.dims != self.rgb.dims or self.density.bbox != self.rgb.bbox:
            raise InvalidInputError("density and rgb grids must share dims and bbox")

    kind = "coarse"

    def params(self) -> dict[str, np.ndarray]:
        return {"density": self.density.values, "rgb": self.rgb.values}


@dataclass
class FineScene:
    density: DenseGrid
    feat: DenseGrid
    mlp: Optional[MlpParams]
    bias: float
    step: float
    k_x: int = 5
    k_d: int = 4

    kind = "fine"

    def __post_init__(self):
        if self.density.channels != 1:
            raise InvalidInputError("fine density grid must have one channel")
        if self.density.dims != self.feat.dims or self.density.bbox != self.feat.bbox:
            raise InvalidInputError("density and feature grids must share dims and bbox")
        if self.mlp is None:
            if self.feat.channels != 3:
                raise InvalidInputError("a diffuse fine scene needs a 3-channel colour grid")
        elif self.mlp.in_dim != self.mlp_in_dim:
            raise InvalidInputError(f"MLP input {self.mlp.in_dim} != expected {self.mlp_in_dim}")

    @property
    def mlp_in_dim(self) -> int:
        return self.feat.channels + encoding_size(self.k_x) + encoding_size(self.k_d)

    def params(self) -> dict[str, np.ndarray]:
        out = {"density": self.density.values, "feat": self.feat.values}
        if self.mlp is not None:
            out.update(self.mlp.arrays())
        return out


def query_coarse(scene: CoarseScene, x):
    """Raw density and sigmoid colour at world point(s) ``x``."""
    raw = trilinear_sample(scene.density, x)[..., 0]
    rgb = sigmoid(trilinear_sample(scene.rgb, x))
    return raw, rgb


def mlp_input(feat: np.ndarray, x: np.ndarray, d: np.ndarray, k_x: int, k_d: int,
              d_encoded: Optional[np.ndarray] = None) -> np.ndarray:
    """Concatenate features with the encoded point and direction.

    ``d_encoded`` may carry a precomputed direction encoding (rays share
    one direction across all their samples).
    """
    enc_d = positional_encoding(d, k_d) if d_encoded is None else d_encoded
    return np.concatenate([feat, positional_encoding(x, k_x), enc_d], axis=-1)


def query_fine(scene: FineScene, x, d):
    """Raw density and view-dependent colour at point(s) ``x`` seen along ``d``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape)
    raw = trilinear_sample(scene.density, x)[..., 0]
    feat = trilinear_sample(scene.feat, x)
    if scene.mlp is None:
        return raw, sigmoid(feat)
    rgb, _ = mlp_forward(scene.mlp, mlp_input(feat, x, d, scene.k_x, scene.k_d))
    return raw, rgb


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_scene(scene, path) -> None:
    """Zip container: ``meta.json``, one ``.dvgr`` per grid, and ``mlp.bin``."""
    meta = {"kind": scene.kind, "bias": scene.bias, "step": scene.step}
    grids = {"density": scene.density}
    if scene.kind == "coarse":
        grids["rgb"] = scene.rgb
    else:
        grids["feat"] = scene.feat
        meta.update(k_x=scene.k_x, k_d=scene.k_d)
    meta["grids"] = {name: f"{name}.dvgr" for name in grids}
    blob = b""
    if scene.kind == "fine" and scene.mlp is not None:
        arrays = scene.mlp.arrays()
        meta["mlp"] = [[name, list(a.shape)] for name, a in arrays.items()]
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, grid in grids.items():
            _write(zf, f"{name}.dvgr", grid_to_bytes(grid))
        if blob:
            _write(zf, "mlp.bin", blob)


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # Fixed timestamp so identical scenes give byte-identical files.
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def load_scene(path):
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            grids = {name: grid_from_bytes(zf.read(fn), f"{path}:{fn}") for name, fn in meta["grids"].items()}
            blob = zf.read("mlp.bin") if "mlp" in meta else None
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read scene checkpoint {path}: {exc}") from exc
    if meta["kind"] == "coarse":
        return CoarseScene(grids["density"], grids["rgb"], meta["bias"], meta["step"])
    mlp = None
    if blob is not None:
        flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        arrays, pos = {}, 0
        for name, shape in meta["mlp"]:
            n = int(np.prod(shape))
            arrays[name] = flat[pos:pos + n].reshape(shape).copy()
            pos += n
        n_layers = len(arrays) // 2
        mlp = MlpParams([arrays[f"mlp.w{i}"] for i in range(n_layers)],
                        [arrays[f"mlp.b{i}"] for i in range(n_layers)])
    return FineScene(grids["density"], grids["feat"], mlp, meta["bias"], meta["step"],
                     meta["k_x"], meta["k_d"])


def scene_summary(scene) -> dict:
    out = {"kind": scene.kind, "bias": scene.bias, "step": scene.step,
           "dims": list(scene.density.dims),
           "bbox_min": scene.density.bbox.min.tolist(), "bbox_max": scene.density.bbox.max.tolist()}
    if scene.kind == "fine":
        out["feat_channels"] = scene.feat.channels
        out["mlp_layers"] = None if scene.mlp is None else [list(w.shape) for w in scene.mlp.weights]
    return out
