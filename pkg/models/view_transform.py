# models/view_transform.py
"""Lift-Splat view transformation: image features → depth-weighted frustum → BEV.

Three lift variants share one output layout, a C×D×Hi×Wi frustum tensor:

* ``vanilla``          depth = softmax(DepthNet(x)),       context = x
* ``depth-supervised`` y = DepthNet([d_radar, x]),          depth = softmax(y[:D]), context = y[D:]
* ``depth-context``    depth = softmax(DepthNet(x)),       context = ContextNet(x)

DepthNet and ContextNet are 1×1 convolutions.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from data.geometry import BevGrid, as_points
from models.numkit import (
    as_tensor,
    conv2d_backward,
    conv2d_forward,
    softmax_backward,
    softmax_forward,
)
from models.params import ParamBundle, uniform_init
from utils.errors import ConfigError, DimensionError
from utils.logger import get_logger

logger = get_logger(__name__)

LSS_VARIANTS = ("vanilla", "depth-supervised", "depth-context")

# radar (x forward, y left, z up) → camera (x right, y down, z forward)
DEFAULT_EXTRINSIC = np.array([
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
])


# --- Camera ---
@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``extrinsic`` maps radar/BEV coordinates into the camera
    frame; ``image_size`` is the (rows, cols) of the image feature map."""
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray = field(default_factory=lambda: DEFAULT_EXTRINSIC.copy())
    image_size: tuple = (16, 32)

    def __post_init__(self):
        extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        object.__setattr__(self, "extrinsic", extrinsic)
        object.__setattr__(self, "image_size", tuple(int(n) for n in self.image_size))
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if extrinsic.shape != (4, 4) or not np.array_equal(extrinsic[3], [0.0, 0.0, 0.0, 1.0]):
            raise ConfigError("extrinsic must be a 4×4 homogeneous rigid transform")
        rot = extrinsic[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-10, rtol=0):
            raise ConfigError("extrinsic rotation is not orthonormal")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"bad image size {self.image_size}")

    @classmethod
    def forward_facing(cls, image_size=(16, 32), fx=16.0, fy=16.0, cx=16.0, cy=6.0):
        return cls(fx, fy, cx, cy, DEFAULT_EXTRINSIC.copy(), image_size)

    def to_camera(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return xyz @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]

    def project(self, xyz):
        """(u, v, depth) per radar-frame point; u is the column, v the row."""
        cam = self.to_camera(xyz)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return u, v, z

    def unproject(self, rows, cols, depth):
        """Radar-frame points for pixel (row, col) at camera depth ``depth``."""
        rows, cols, depth = np.broadcast_arrays(
            np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64), np.asarray(depth, dtype=np.float64)
        )
        cam = np.stack([(cols - self.cx) / self.fx * depth, (rows - self.cy) / self.fy * depth, depth], axis=-1)
        inv = np.linalg.inv(self.extrinsic)
        return cam @ inv[:3, :3].T + inv[:3, 3]

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "extrinsic": self.extrinsic.tolist(), "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                       np.asarray(data["extrinsic"], dtype=np.float64), tuple(data["image_size"]))
        except KeyError as exc:
            raise ConfigError(f"camera calibration is missing {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DepthBins:
    """Uniform depth bins over [d_min, d_max] metres."""
    count: int = 16
    d_min: float = 1.0
    d_max: float = 25.6

    def __post_init__(self):
        if self.count < 2:
            raise ConfigError(f"need at least 2 depth bins, got {self.count}")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"depth range must satisfy 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")

    @property
    def edges(self):
        return np.linspace(self.d_min, self.d_max, self.count + 1)

    @property
    def centers(self):
        edges = self.edges
        return 0.5 * (edges[:-1] + edges[1:])


# --- Frustum geometry ---
@dataclass
class FrustumGeometry:
    """Radar-frame xyz of every (bin, row, col) frustum cell and its flat BEV
    cell index (-1 where the cell falls outside the grid)."""
    xyz: np.ndarray
    cell: np.ndarray
    grid: BevGrid

    @property
    def in_range(self):
        return self.cell >= 0


def build_frustum(camera, bins, grid, transform=None):
    """Lift every pixel ray to the bin centres; ``transform`` (a RigidTransform)
    moves the frustum with the BEV augmentation."""
    Hi, Wi = camera.image_size
    d = bins.centers
    rows, cols = np.meshgrid(np.arange(Hi), np.arange(Wi), indexing="ij")
    xyz = camera.unproject(rows[None], cols[None], d[:, None, None])
    if transform is not None:
        xyz = transform.apply_xyz(xyz.reshape(-1, 3)).reshape(xyz.shape)
    r, c, valid = grid.cell_index(xyz[..., 0], xyz[..., 1])
    cell = np.where(valid, r * grid.cols + c, -1)
    return FrustumGeometry(xyz, cell, grid)


@dataclass
class FrustumFeatures:
    """C×D×Hi×Wi context features weighted by the per-pixel depth distribution."""
    features: np.ndarray
    depth: np.ndarray
    geometry: Optional[FrustumGeometry] = None


# --- Lift ---
@dataclass
class LssParams(ParamBundle):
    variant: str
    bins: int
    depth_kernel: np.ndarray
    depth_bias: np.ndarray
    context_kernel: Optional[np.ndarray] = None
    context_bias: Optional[np.ndarray] = None

    @property
    def context_channels(self):
        if self.variant == "depth-supervised":
            return self.depth_kernel.shape[1] - 1
        return self.depth_kernel.shape[1]


def init_lss_params(variant, channels, bins, rng):
    if variant not in LSS_VARIANTS:
        raise ConfigError(f"unknown LSS variant '{variant}', expected one of {LSS_VARIANTS}")
    C, D = channels, bins
    if variant == "depth-supervised":
        return LssParams(variant, D, uniform_init(rng, C + 1, (D + C, C + 1, 1, 1)), np.zeros(D + C))
    params = LssParams(variant, D, uniform_init(rng, C, (D, C, 1, 1)), np.zeros(D))
    if variant == "depth-context":
        params.context_kernel = uniform_init(rng, C, (C, C, 1, 1))
        params.context_bias = np.zeros(C)
    return params


def _depth_softmax(logits):
    """Softmax over axis 0 of a D×Hi×Wi logit map."""
    probs, sm = softmax_forward(np.moveaxis(logits, 0, -1))
    return np.moveaxis(probs, -1, 0), sm


def _depth_softmax_backward(dprobs, sm):
    return np.moveaxis(softmax_backward(np.moveaxis(dprobs, 0, -1), sm), -1, 0)


def _outer(context, depth):
    return context[:, None] * depth[None]


def _outer_backward(dout, context, depth):
    return np.einsum("cduv,duv->cuv", dout, depth), np.einsum("cduv,cuv->duv", dout, context)


def vanilla_lss_forward(params, x):
    x = as_tensor(x)
    logits, depth_cache = conv2d_forward(x, params.depth_kernel, params.depth_bias)
    depth, sm = _depth_softmax(logits)
    return _outer(x, depth), (x, depth, depth_cache, sm)


def vanilla_lss_backward(dout, cache):
    x, depth, depth_cache, sm = cache
    dx_ctx, ddepth = _outer_backward(dout, x, depth)
    dx_net, dkernel, dbias = conv2d_backward(_depth_softmax_backward(ddepth, sm), depth_cache)
    return LssParams("vanilla", depth.shape[0], dkernel, dbias), dx_ctx + dx_net


def depth_supervised_lss_forward(params, x, d_radar):
    x, d_radar = as_tensor(x), as_tensor(d_radar)
    if d_radar.ndim == 2:
        d_radar = d_radar[None]
    if d_radar.shape[1:] != x.shape[1:]:
        raise DimensionError(f"radar depth map {d_radar.shape[1:]} is not aligned with image features {x.shape[1:]}")
    D = params.bins
    if D < 1 or params.depth_kernel.shape[0] <= D:
        raise ConfigError(f"DepthNet emits {params.depth_kernel.shape[0]} channels, must exceed D={D}")
    y, net_cache = conv2d_forward(np.concatenate([d_radar, x], axis=0), params.depth_kernel, params.depth_bias)
    depth, sm = _depth_softmax(y[:D])
    context = y[D:]
    return _outer(context, depth), (D, context, depth, net_cache, sm, d_radar.shape[0])


def depth_supervised_lss_backward(dout, cache):
    D, context, depth, net_cache, sm, depth_channels = cache
    dcontext, ddepth = _outer_backward(dout, context, depth)
    dy = np.concatenate([_depth_softmax_backward(ddepth, sm), dcontext], axis=0)
    dinput, dkernel, dbias = conv2d_backward(dy, net_cache)
    return LssParams("depth-supervised", D, dkernel, dbias), dinput[depth_channels:], dinput[:depth_channels]


def depth_context_lss_forward(params, x):
    x = as_tensor(x)
    if params.context_kernel is None:
        raise ConfigError("depth-context LSS needs a ContextNet")
    logits, depth_cache = conv2d_forward(x, params.depth_kernel, params.depth_bias)
    depth, sm = _depth_softmax(logits)
    context, ctx_cache = conv2d_forward(x, params.context_kernel, params.context_bias)
    return _outer(context, depth), (context, depth, depth_cache, sm, ctx_cache)


def depth_context_lss_backward(dout, cache):
    context, depth, depth_cache, sm, ctx_cache = cache
    dcontext, ddepth = _outer_backward(dout, context, depth)
    dx_ctx, dctx_kernel, dctx_bias = conv2d_backward(dcontext, ctx_cache)
    dx_depth, dkernel, dbias = conv2d_backward(_depth_softmax_backward(ddepth, sm), depth_cache)
    return LssParams("depth-context", depth.shape[0], dkernel, dbias, dctx_kernel, dctx_bias), dx_ctx + dx_depth


def lss_forward(params, x, d_radar=None):
    """Dispatch on ``params.variant``; only depth-supervised reads ``d_radar``."""
    if params.variant == "vanilla":
        out, cache = vanilla_lss_forward(params, x)
    elif params.variant == "depth-context":
        out, cache = depth_context_lss_forward(params, x)
    elif params.variant == "depth-supervised":
        if d_radar is None:
            raise ConfigError("depth-supervised LSS needs a rasterized radar depth map")
        out, cache = depth_supervised_lss_forward(params, x, d_radar)
    else:
        raise ConfigError(f"unknown LSS variant '{params.variant}'")
    return out, (params.variant, cache)


def lss_backward(dout, cache):
    """Returns (param_grads, dx, d_radar_grad or None)."""
    variant, inner = cache
    if variant == "vanilla":
        return (*vanilla_lss_backward(dout, inner), None)
    if variant == "depth-context":
        return (*depth_context_lss_backward(dout, inner), None)
    return depth_supervised_lss_backward(dout, inner)


def lift(params, x, d_radar=None, geometry=None):
    """Convenience wrapper returning a FrustumFeatures record."""
    features, (_, cache) = lss_forward(params, x, d_radar)
    depth = cache[2] if params.variant == "depth-supervised" else cache[1]
    return FrustumFeatures(features, depth, geometry)


# --- Radar depth and splat ---
def rasterize_radar_depth(points, camera):
    """1×Hi×Wi map holding the nearest radar depth per pixel, zero where empty."""
    points = as_points(points)
    Hi, Wi = camera.image_size
    depth = np.full(Hi * Wi, np.inf)
    if len(points):
        u, v, z = camera.project(points[:, :3])
        front = z > 0
        u, v, z = u[front], v[front], z[front]
        cols = np.floor(u + 0.5).astype(np.int64)
        rows = np.floor(v + 0.5).astype(np.int64)
        inside = (rows >= 0) & (rows < Hi) & (cols >= 0) & (cols < Wi)
        np.minimum.at(depth, rows[inside] * Wi + cols[inside], z[inside])
        logger.debug("rasterized %d of %d radar points into the image", int(inside.sum()), len(points))
    depth[np.isinf(depth)] = 0.0
    return depth.reshape(1, Hi, Wi)


def splat_to_bev_forward(features, geometry):
    """Sum-pool every in-range frustum cell into its BEV cell; C×rows×cols out."""
    features = as_tensor(features)
    C = features.shape[0]
    if features.shape[1:] != geometry.cell.shape:
        raise DimensionError(f"frustum features {features.shape[1:]} do not match geometry {geometry.cell.shape}")
    grid = geometry.grid
    flat_cell = geometry.cell.reshape(-1)
    keep = flat_cell >= 0
    bev = np.zeros((grid.rows * grid.cols, C))
    np.add.at(bev, flat_cell[keep], features.reshape(C, -1).T[keep])
    return bev.T.reshape(C, grid.rows, grid.cols), (features.shape, flat_cell, keep)


def splat_to_bev_backward(dout, cache):
    shape, flat_cell, keep = cache
    C = shape[0]
    dflat = dout.reshape(C, -1)
    dfeat = np.zeros((C, flat_cell.size))
    dfeat[:, keep] = dflat[:, flat_cell[keep]]
    return dfeat.reshape(shape)


def splat_to_bev(frustum, geometry=None):
    geometry = frustum.geometry if geometry is None else geometry
    return splat_to_bev_forward(frustum.features, geometry)[0]


def camera_bev_forward(params, x, d_radar, geometry):
    """Lift then splat; the camera branch of the pipeline."""
    frustum, lss_cache = lss_forward(params, x, d_radar)
    bev, splat_cache = splat_to_bev_forward(frustum, geometry)
    return bev, (lss_cache, splat_cache)


def camera_bev_backward(dout, cache):
    lss_cache, splat_cache = cache
    return lss_backward(splat_to_bev_backward(dout, splat_cache), lss_cache)
