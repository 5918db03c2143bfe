# experiments/render.py
"""Feature-map images: binary PGM per BEV map, a PPM with boxes overlaid and a
side-by-side PNG panel. Image rows follow BEV rows (x), columns BEV columns (y)."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from data.scene_io import load_scene  # noqa: E402
from data.synthetic import generate_scenes  # noqa: E402
from pipelines.fusion_pipeline import FusionPipeline  # noqa: E402
from utils.errors import DimensionError  # noqa: E402
from utils.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

MID_GRAY = 128
GT_COLOR = (0, 255, 0)
DET_COLOR = (255, 0, 0)
PANEL_TITLES = {"camera": "Camera", "radar": "Radar", "conv_fused": "Conv-fused", "fused": "FP-DDCA-fused"}


def to_gray(fmap, name="map"):
    """Channel mean, min-max normalized to 0..255.

    An all-zero map is black; any other constant map is mid-gray.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 3:
        fmap = fmap.mean(axis=0)
    if fmap.ndim != 2:
        raise DimensionError(f"{name}: expected a (C, rows, cols) or (rows, cols) map, got {fmap.shape}")
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi == lo:
        if lo == 0.0:
            return np.zeros(fmap.shape, dtype=np.uint8)
        logger.warning("%s is constant (%g); rendering mid-gray", name, lo)
        return np.full(fmap.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, gray):
    rows, cols = gray.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + gray.astype(np.uint8).tobytes())
    return path


def write_ppm(path, rgb):
    rows, cols, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{cols} {rows}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())
    return path


def read_pnm(path):
    """Inverse of write_pgm / write_ppm."""
    blob = Path(path).read_bytes()
    magic, size, maxval, body = blob.split(b"\n", 3)
    cols, rows = (int(v) for v in size.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported image header")
    shape = (rows, cols) if magic == b"P5" else (rows, cols, 3)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def draw_box_outlines(rgb, boxes, grid, color):
    out = rgb.copy()
    samples = max(grid.rows, grid.cols) * 4
    t = np.linspace(0.0, 1.0, samples)[:, None]
    for box in boxes:
        corners = box.corners_bev()
        for a, b in zip(corners, np.roll(corners, -1, axis=0)):
            xy = a + t * (b - a)
            r, c, valid = grid.cell_index(xy[:, 0], xy[:, 1])
            out[r[valid], c[valid]] = color
    return out


def boxes_overlay(gray, detections, ground_truth, grid):
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    rgb = draw_box_outlines(rgb, ground_truth, grid, GT_COLOR)
    return draw_box_outlines(rgb, detections, grid, DET_COLOR)


def write_panel(path, grays):
    fig, axes = plt.subplots(1, len(grays), figsize=(3 * len(grays), 3.2))
    for ax, (name, gray) in zip(np.atleast_1d(axes), grays.items()):
        ax.imshow(gray, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        ax.set_title(PANEL_TITLES.get(name, name))
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def render_scene(pipeline, scene, out, conv_pipeline=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = pipeline.prepare(scene)
    maps = pipeline.feature_maps(inputs)
    grays = {"camera": to_gray(maps["camera"], "camera"), "radar": to_gray(maps["radar"], "radar")}
    if conv_pipeline is not None:
        grays["conv_fused"] = to_gray(conv_pipeline.feature_maps(conv_pipeline.prepare(scene))["fused"], "conv_fused")
    grays["fused"] = to_gray(maps["fused"], "fused")
    written = [write_pgm(out / f"{name}.pgm", gray) for name, gray in grays.items()]
    detections = pipeline.detect(inputs)
    written.append(write_ppm(out / "boxes.ppm", boxes_overlay(grays["fused"], detections, inputs.boxes, pipeline.grid)))
    written.append(write_panel(out / "feature_maps.png", grays))
    logger.info("rendered %d files to %s (%d detections)", len(written), out, len(detections))
    return written


def cmd_render(checkpoint, out, scene_dir=None, scene_seed=None, conv_checkpoint=None, log_level=None):
    """Render one scene (a saved directory, else generated from ``scene_seed``)
    through a checkpoint; ``conv_checkpoint`` adds the convolution-fused map."""
    pipeline = FusionPipeline.from_checkpoint(checkpoint, log_level)
    if scene_dir is not None:
        scene = load_scene(scene_dir)
    else:
        seed = pipeline.config.seed if scene_seed is None else scene_seed
        scene = generate_scenes(pipeline.scene_spec(), 1, seed)[0]
    conv_pipeline = None
    if conv_checkpoint is not None:
        conv_pipeline = FusionPipeline.from_checkpoint(conv_checkpoint, log_level)
    return render_scene(pipeline, scene, out, conv_pipeline)
