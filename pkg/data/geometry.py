 # data/geometry.py
"""4D-radar point-cloud geometry.

Point clouds are (N, 4) float64 arrays with columns x, y, z (metres, radar
frame) and v_r (m/s, ego-motion compensated radial velocity).
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from utils.errors import ConfigError, ContractError
from utils.logger import get_logger

logger = get_logger(__name__)

POINT_COLUMNS = ("x", "y", "z", "v_r")
_EXTENT_TOL = 1e-9


def as_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return np.zeros((0, 4))
    if points.ndim != 2 or points.shape[1] != 4:
        raise ContractError(f"points must be (N, 4) [x, y, z, v_r], got {points.shape}")
    return points


# --- Ranges and voxels ---
@dataclass(frozen=True)
class RangeSpec:
    """Axis-aligned bounds in metres; membership is min <= coord < max per axis."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float = -math.inf
    z_max: float = math.inf

    def __post_init__(self):
        for axis in "xyz":
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            if not lo < hi:
                raise ConfigError(f"range {axis}: min {lo} must be below max {hi}")

    @classmethod
    def vehicle_pcr(cls):
        """51.2 m ahead, ±25.6 m lateral, -3..2 m height."""
        return cls(0.0, 51.2, -25.6, 25.6, -3.0, 2.0)

    @property
    def mins(self):
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self):
        return np.array([self.x_max, self.y_max, self.z_max])

    def contains(self, xyz, strict=False):
        """Membership mask for (M, >=3) coordinates; ``strict`` uses open bounds."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))[:, :3]
        if strict:
            return np.all((xyz > self.mins) & (xyz < self.maxs), axis=1)
        return np.all((xyz >= self.mins) & (xyz < self.maxs), axis=1)


@dataclass(frozen=True)
class VoxelSpec:
    """Voxel edge lengths over a range; a trailing partial voxel per axis is dropped."""
    size: tuple
    pcr: RangeSpec

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ConfigError(f"voxel size must be three positive lengths, got {self.size}")
        extent = self.pcr.maxs - self.pcr.mins
        if not np.all(np.isfinite(extent)):
            raise ConfigError("voxel range must be finite on every axis")

    @property
    def dims(self):
        extent = self.pcr.maxs - self.pcr.mins
        return tuple(int(math.floor(e / s + _EXTENT_TOL)) for e, s in zip(extent, self.size))

    @property
    def effective_range(self):
        """The range actually covered by whole voxels."""
        mins = self.pcr.mins
        maxs = mins + np.array(self.dims) * np.array(self.size)
        maxs = np.minimum(maxs, self.pcr.maxs)
        return RangeSpec(mins[0], maxs[0], mins[1], maxs[1], mins[2], maxs[2])

    def voxel_bounds(self, index):
        lo = self.pcr.mins + np.asarray(index) * np.array(self.size)
        return lo, lo + np.array(self.size)


@dataclass
class VoxelGrid:
    """Occupied voxels, their pooled features and the point→voxel assignment.

    ``features`` columns: mean x, mean y, mean z, mean v_r, point count.
    """
    spec: VoxelSpec
    indices: np.ndarray
    features: np.ndarray
    point_voxel: np.ndarray
    points: np.ndarray

    @property
    def counts(self):
        return self.features[:, 4].astype(np.int64)

    def points_in(self, k):
        return self.points[self.point_voxel == k]


def filter_pcr(points, spec):
    """Keep points with min <= coord < max on every axis, preserving order."""
    points = as_points(points)
    return points[spec.contains(points[:, :3])]


def voxelize(points, spec):
    """Assign PCR-filtered points to voxels and mean-pool their attributes."""
    points = as_points(points)
    eff = spec.effective_range
    inside = eff.contains(points[:, :3])
    if not np.all(inside):
        bad = int(np.argmin(inside))
        raise ContractError(f"point {bad} {points[bad, :3].tolist()} lies outside the voxel range; filter first")
    dims = np.array(spec.dims)
    idx = np.floor((points[:, :3] - spec.pcr.mins) / np.array(spec.size)).astype(np.int64)
    # half-open range: floor rounds up to dims only within an ulp of the max
    idx = np.minimum(idx, dims - 1)
    if len(points) == 0:
        return VoxelGrid(spec, np.zeros((0, 3), np.int64), np.zeros((0, 5)), np.zeros(0, np.int64), points)
    indices, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(indices), 4))
    np.add.at(sums, inverse, points)
    features = np.column_stack([sums / counts[:, None], counts.astype(np.float64)])
    return VoxelGrid(spec, indices, features, inverse, points)


# --- Rigid transforms ---
@dataclass(frozen=True)
class RigidTransform:
    """p' = scale · R · F · p + t, where F negates y when ``flip_y`` (and x when ``flip_x``)."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if rotation.shape != (3, 3) or not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-10, rtol=0):
            raise ConfigError("rotation must be a 3×3 orthonormal matrix")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_euler("z", yaw).as_matrix(), np.asarray(translation, dtype=np.float64))

    @property
    def yaw(self):
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def linear(self):
        flips = np.diag([-1.0 if self.flip_x else 1.0, -1.0 if self.flip_y else 1.0, 1.0])
        return self.scale * self.rotation @ flips

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.linear()
        out[:3, 3] = self.translation
        return out

    def is_identity(self):
        return np.array_equal(self.matrix(), np.eye(4))

    def apply_xyz(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.linear().T + self.translation

    def apply_points(self, points):
        """Transform positions; v_r is a scalar radial speed and is carried unchanged."""
        points = as_points(points)
        out = points.copy()
        out[:, :3] = self.apply_xyz(points[:, :3])
        return out

    def apply_box(self, box):
        center = self.apply_xyz(np.array([box.x, box.y, box.z]))
        theta = box.theta
        if self.flip_y:
            theta = -theta
        if self.flip_x:
            theta = math.pi - theta
        theta += self.yaw
        return replace(box, x=center[0], y=center[1], z=center[2],
                       w=box.w * self.scale, l=box.l * self.scale, h=box.h * self.scale, theta=theta)

    def apply_boxes(self, boxes):
        return [self.apply_box(b) for b in boxes]


def relative_transform(current_pose, past_pose):
    """4×4 matrix mapping past-ego coordinates into current-ego coordinates."""
    return np.linalg.inv(current_pose.matrix()) @ past_pose.matrix()


def stack_frames(frames, k):
    """Concatenate the last ``k`` sweeps expressed in the current ego frame.

    ``frames`` is ordered oldest → current; each entry is (points, pose) with
    pose the world←ego transform at that sweep.
    """
    if k < 1 or k > len(frames):
        raise ValueError(f"cannot stack {k} frames from {len(frames)} available")
    current_pose = frames[-1][1]
    stacked = []
    for points, pose in frames[-k:]:
        points = as_points(points)
        m = relative_transform(current_pose, pose)
        moved = points.copy()
        moved[:, :3] = points[:, :3] @ m[:3, :3].T + m[:3, 3]
        stacked.append(moved)
    return np.vstack(stacked) if stacked else np.zeros((0, 4))


# --- Augmentation ---
@dataclass(frozen=True)
class AugmentConfig:
    rotation_range: tuple = (-math.pi / 8, math.pi / 8)
    scale_range: tuple = (0.95, 1.05)
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError(f"bad scale range {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ConfigError(f"bad rotation range {self.rotation_range}")


def sample_augmentation(rng, config):
    yaw = rng.uniform(*config.rotation_range)
    scale = rng.uniform(*config.scale_range)
    flip = bool(rng.uniform() < config.flip_prob)
    return RigidTransform(Rotation.from_euler("z", yaw).as_matrix(), np.zeros(3), flip_y=flip, scale=scale)


def augment(points, boxes, seed, config=None):
    """Randomly rotate, flip and rescale points and boxes together.

    Returns (points', boxes', recorded); ``recorded`` replays the exact
    transform on the originals.
    """
    config = AugmentConfig() if config is None else config
    rng = np.random.default_rng(seed)
    recorded = sample_augmentation(rng, config)
    logger.debug("augmentation yaw=%.4f scale=%.4f flip_y=%s", recorded.yaw, recorded.scale, recorded.flip_y)
    return recorded.apply_points(points), recorded.apply_boxes(boxes), recorded


# --- Points CSV ---
def write_points_csv(path, points):
    pd.DataFrame(as_points(points), columns=POINT_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def read_points_csv(path):
    df = pd.read_csv(path)
    missing = [c for c in POINT_COLUMNS if c not in df.columns]
    if missing:
        raise ContractError(f"{path}: missing point columns {missing}")
    return df[list(POINT_COLUMNS)].to_numpy(dtype=np.float64)


# --- BEV grid ---
@dataclass(frozen=True)
class BevGrid:
    """Top-down grid: rows run along x, columns along y; cell (r, c) covers
    [x_min + r·cell, x_min + (r+1)·cell) × [y_min + c·cell, ...)."""
    x_min: float
    y_min: float
    cell_size: float
    rows: int
    cols: int

    @classmethod
    def from_range(cls, pcr, cell_size):
        rows = int(math.floor((pcr.x_max - pcr.x_min) / cell_size + _EXTENT_TOL))
        cols = int(math.floor((pcr.y_max - pcr.y_min) / cell_size + _EXTENT_TOL))
        return cls(pcr.x_min, pcr.y_min, cell_size, rows, cols)

    @property
    def shape(self):
        return (self.rows, self.cols)

    def cell_index(self, x, y):
        """(rows, cols, valid) for arrays of x, y."""
        r = np.floor((np.asarray(x) - self.x_min) / self.cell_size).astype(np.int64)
        c = np.floor((np.asarray(y) - self.y_min) / self.cell_size).astype(np.int64)
        valid = (r >= 0) & (r < self.rows) & (c >= 0) & (c < self.cols)
        return r, c, valid

    def cell_centers(self):
        """(rows, cols, 2) metric centres of every cell."""
        xs = self.x_min + (np.arange(self.rows) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.cols) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)
