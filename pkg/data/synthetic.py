# data/synthetic.py
"""Deterministic synthetic scenes: ground-truth boxes, 4D-radar sweeps with
noise, X-ray returns and dropout, an ego trajectory for frame stacking, and a
stub-encoded camera feature map.

Every scene draws from its own counter-based (Philox) generators keyed by the
scene seed, so scenes can be generated in any order or in parallel.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np
import shapely

from data.geometry import (
    RangeSpec,
    RigidTransform,
    VoxelSpec,
    as_points,
    stack_frames,
    voxelize,
)
from evaluation.boxes import CLASSES, Box3D
from models.head import GROUND_Z
from models.numkit import conv2d_forward
from models.view_transform import CameraModel
from utils.errors import ConfigError, GenerationError
from utils.logger import get_logger

logger = get_logger(__name__)

# (w, l, h) in metres
CLASS_SIZES = {"car": (1.8, 4.2, 1.6), "pedestrian": (0.6, 0.8, 1.7), "cyclist": (0.7, 1.8, 1.5)}
CLASS_SPEEDS = {"car": 8.0, "pedestrian": 1.5, "cyclist": 5.0}
VOXEL_FEATURES = 5
PLACEMENT_GAP = 0.2

STREAM_PLACEMENT = 0
STREAM_MOTION = 1
STREAM_RADAR = 2


def desk_pcr():
    return RangeSpec(0.0, 12.8, -6.4, 6.4, -3.0, 2.0)


@dataclass(frozen=True)
class SceneSpec:
    """Scene recipe. ``layout`` boxes are placed verbatim before the random ones."""
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"car": 1, "pedestrian": 1, "cyclist": 1})
    sizes: dict = field(default_factory=lambda: dict(CLASS_SIZES))
    layout: tuple = ()
    pcr: RangeSpec = field(default_factory=desk_pcr)
    ground_z: float = GROUND_Z
    noise_sigma: float = 0.1
    p_xray: float = 0.1
    dropout: float = 0.0
    point_density: float = 8.0
    frames: int = 1
    frame_dt: float = 0.1
    ego_speed: float = 5.0
    max_retries: int = 200
    camera: CameraModel = field(default_factory=CameraModel.forward_facing)
    camera_channels: int = 8
    encoder_seed: int = 1234
    render_depth: float = 25.6
    depth_samples: int = 64

    def __post_init__(self):
        for name in ("p_xray", "dropout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for label, n in self.counts.items():
            if label not in CLASSES:
                raise ConfigError(f"unknown class '{label}' in scene counts")
            if n < 0:
                raise ConfigError(f"negative count {n} for {label}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.point_density < 0 or self.max_retries < 1:
            raise ConfigError("point_density must be >= 0 and max_retries >= 1")


@dataclass
class Scene:
    spec: SceneSpec
    boxes: list
    velocities: np.ndarray
    frames: list
    xray: np.ndarray
    camera: CameraModel
    camera_features: np.ndarray

    @property
    def points(self):
        """Radar points of the current sweep."""
        return self.frames[-1][0]

    def stacked(self, k):
        return stack_frames(self.frames, k)


def scene_rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


def scene_specs(base, count, first_seed):
    return [replace(base, seed=first_seed + i) for i in range(count)]


# --- Placement ---
def _inside_xy(box, pcr):
    corners = box.corners_bev()
    return bool(np.all((corners[:, 0] > pcr.x_min) & (corners[:, 0] < pcr.x_max)
                       & (corners[:, 1] > pcr.y_min) & (corners[:, 1] < pcr.y_max)))


def place_boxes(spec, rng):
    """Non-overlapping boxes inside the PCR; GenerationError when a box cannot
    be placed within ``max_retries`` draws."""
    boxes = list(spec.layout)
    polygons = [b.polygon() for b in boxes]
    for label in CLASSES:
        w0, l0, h0 = spec.sizes[label]
        for k in range(spec.counts.get(label, 0)):
            for _ in range(spec.max_retries):
                w, l, h = np.array([w0, l0, h0]) * rng.uniform(0.9, 1.1, size=3)
                box = Box3D(
                    x=rng.uniform(spec.pcr.x_min, spec.pcr.x_max),
                    y=rng.uniform(spec.pcr.y_min, spec.pcr.y_max),
                    z=spec.ground_z + 0.5 * h, w=w, l=l, h=h,
                    theta=rng.uniform(-math.pi, math.pi), label=label,
                )
                poly = box.polygon()
                if _inside_xy(box, spec.pcr) and all(poly.distance(p) > PLACEMENT_GAP for p in polygons):
                    boxes.append(box)
                    polygons.append(poly)
                    break
            else:
                raise GenerationError(
                    f"could not place {label} #{k} after {spec.max_retries} tries (seed {spec.seed})"
                )
    return boxes


def box_velocities(boxes, spec, rng):
    """(n, 2) planar velocities along each heading; layout boxes stay still."""
    velocities = np.zeros((len(boxes), 2))
    for i, box in enumerate(boxes):
        if i < len(spec.layout):
            continue
        speed = rng.uniform(0.0, CLASS_SPEEDS[box.label])
        velocities[i] = speed * np.array([math.cos(box.theta), math.sin(box.theta)])
    return velocities


# --- Radar ---
def _visible_faces(box):
    """(start, end) corner pairs of the vertical faces facing the sensor at the origin."""
    corners = box.corners_bev()
    faces = []
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        edge = b - a
        normal = np.array([edge[1], -edge[0]])
        if normal @ (0.5 * (a + b)) < 0:
            faces.append((a, b))
    return faces


def occluded_by(xy, boxes, skip):
    """Mask of points whose line of sight from the origin crosses another box."""
    if len(xy) == 0:
        return np.zeros(0, dtype=bool)
    lines = shapely.linestrings(np.stack([np.zeros_like(xy), xy], axis=1))
    blocked = np.zeros(len(xy), dtype=bool)
    for j, other in enumerate(boxes):
        if j != skip:
            blocked |= shapely.intersects(lines, other.polygon())
    return blocked


def sample_returns(boxes, velocities, spec, rng):
    """One radar sweep in the sensor frame → (points (N, 4), xray mask)."""
    chunks, xray_chunks = [], []
    for i, box in enumerate(boxes):
        for a, b in _visible_faces(box):
            area = float(np.linalg.norm(b - a)) * box.h
            n = int(rng.poisson(spec.point_density * area))
            t = rng.uniform(size=n)
            z = rng.uniform(box.bottom, box.top, size=n)
            xy = a + t[:, None] * (b - a)
            hidden = occluded_by(xy, boxes, i)
            keep = ~hidden | (rng.uniform(size=n) < spec.p_xray)
            xyz = np.column_stack([xy, z]) + rng.normal(0.0, spec.noise_sigma, size=(n, 3))
            keep &= rng.uniform(size=n) >= spec.dropout
            norms = np.linalg.norm(xyz, axis=1)
            v_r = (xyz[:, :2] @ velocities[i]) / np.where(norms > 0, norms, 1.0)
            chunks.append(np.column_stack([xyz, v_r])[keep])
            xray_chunks.append(hidden[keep])
    if not chunks:
        return np.zeros((0, 4)), np.zeros(0, dtype=bool)
    return np.vstack(chunks), np.concatenate(xray_chunks)


def _shift_box(box, dx, dy):
    return replace(box, x=box.x + dx, y=box.y + dy)


def simulate_sweeps(boxes, velocities, spec, rng):
    """Sweeps oldest → current with world←ego poses; the current ego frame is
    the world frame and the ego drives along +x."""
    frames, xray = [], None
    step = spec.ego_speed * spec.frame_dt
    for ago in reversed(range(spec.frames)):
        ego_x = -ago * step
        shifted = [
            _shift_box(b, -v[0] * ago * spec.frame_dt - ego_x, -v[1] * ago * spec.frame_dt)
            for b, v in zip(boxes, velocities)
        ]
        points, xray = sample_returns(shifted, velocities, spec, rng)
        frames.append((points, RigidTransform(translation=np.array([ego_x, 0.0, 0.0]))))
    return frames, xray


def radar_voxel_spec(grid, z_min, z_max, z_slab):
    pcr = RangeSpec(grid.x_min, grid.x_min + grid.rows * grid.cell_size,
                    grid.y_min, grid.y_min + grid.cols * grid.cell_size, z_min, z_max)
    return VoxelSpec((grid.cell_size, grid.cell_size, z_slab), pcr)


def radar_channels(voxel_spec):
    return VOXEL_FEATURES * voxel_spec.dims[2]


def radar_to_bev(points, voxel_spec, grid):
    """Voxel-pool the points and fold the z slabs into channels:
    channel = slab · 5 + feature (mean x, y, z, v_r, count)."""
    nx, ny, nz = voxel_spec.dims
    if (nx, ny) != grid.shape or not np.allclose(voxel_spec.size[:2], grid.cell_size) \
            or not np.allclose(voxel_spec.pcr.mins[:2], [grid.x_min, grid.y_min]):
        raise ConfigError(f"voxel grid {nx}×{ny} at {voxel_spec.size[:2]} m does not match BEV grid {grid.shape} at {grid.cell_size} m")
    vg = voxelize(as_points(points), voxel_spec)
    bev = np.zeros((nz, VOXEL_FEATURES, nx, ny))
    if len(vg.indices):
        ix, iy, iz = vg.indices.T
        bev[iz, :, ix, iy] = vg.features
    return bev.reshape(nz * VOXEL_FEATURES, nx, ny)


# --- Camera ---
def render_silhouettes(boxes, camera, far, samples):
    """(K + 1)×Hi×Wi: one-hot class of the nearest box hit along each pixel ray
    plus an inverse-depth cue channel; zero where the ray hits nothing."""
    Hi, Wi = camera.image_size
    near = 0.5
    depths = np.linspace(near, far, samples)
    rows, cols = np.meshgrid(np.arange(Hi), np.arange(Wi), indexing="ij")
    xyz = camera.unproject(rows[None], cols[None], depths[:, None, None])
    first = np.full((Hi, Wi), samples)
    owner = np.full((Hi, Wi), -1)
    for b, box in enumerate(boxes):
        inside = box.contains_bev(xyz[..., :2].reshape(-1, 2)).reshape(samples, Hi, Wi)
        inside &= (xyz[..., 2] >= box.bottom) & (xyz[..., 2] <= box.top)
        hit = inside.any(axis=0)
        idx = np.where(hit, inside.argmax(axis=0), samples)
        closer = idx < first
        first = np.where(closer, idx, first)
        owner = np.where(closer, b, owner)
    out = np.zeros((len(CLASSES) + 1, Hi, Wi))
    r, c = np.nonzero(owner >= 0)
    for i, j in zip(r, c):
        out[CLASSES.index(boxes[owner[i, j]].label), i, j] = 1.0
        out[-1, i, j] = near / depths[first[i, j]]
    return out


@dataclass(frozen=True)
class StubEncoder:
    """Fixed two-layer random 3×3 convolution stack with tanh, no biases."""
    kernel1: np.ndarray
    kernel2: np.ndarray

    @classmethod
    def from_seed(cls, seed, in_channels, channels):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 99])))
        k1 = rng.normal(0.0, 1.0 / math.sqrt(9 * in_channels), (channels, in_channels, 3, 3))
        k2 = rng.normal(0.0, 1.0 / math.sqrt(9 * channels), (channels, channels, 3, 3))
        return cls(k1, k2)

    def __call__(self, image):
        hidden = np.tanh(conv2d_forward(image, self.kernel1)[0])
        return np.tanh(conv2d_forward(hidden, self.kernel2)[0])


def encode_camera(boxes, spec):
    silhouettes = render_silhouettes(boxes, spec.camera, spec.render_depth, spec.depth_samples)
    encoder = StubEncoder.from_seed(spec.encoder_seed, silhouettes.shape[0], spec.camera_channels)
    return encoder(silhouettes)


# --- Scenes ---
def generate_scene(spec):
    boxes = place_boxes(spec, scene_rng(spec.seed, STREAM_PLACEMENT))
    velocities = box_velocities(boxes, spec, scene_rng(spec.seed, STREAM_MOTION))
    frames, xray = simulate_sweeps(boxes, velocities, spec, scene_rng(spec.seed, STREAM_RADAR))
    features = encode_camera(boxes, spec)
    logger.debug("scene seed=%d: %d boxes, %d radar points (%d x-ray)",
                 spec.seed, len(boxes), len(frames[-1][0]), int(xray.sum()))
    return Scene(spec, boxes, velocities, frames, xray, spec.camera, features)


def generate_scenes(base, count, first_seed):
    return [generate_scene(s) for s in scene_specs(base, count, first_seed)]
