# pipelines/fusion_pipeline.py
"""The toy radar–camera detector, driven epoch by epoch.

Radar branch: stacked sweeps → PCR filter → voxel pooling → 1×1 conv to C.
Camera branch: stub image features → LSS lift → splat to BEV.
Fusion: FP-DDCA (or the convolutional pyramid, or one modality alone),
then a 1×1 occupancy head trained with BCE.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from data.geometry import (
    AugmentConfig,
    BevGrid,
    RangeSpec,
    augment,
    filter_pcr,
)
from data.synthetic import (
    SceneSpec,
    generate_scenes,
    radar_channels,
    radar_to_bev,
    radar_voxel_spec,
)
from evaluation.metrics import EvalConfig, evaluate_frames
from models.fuser import (
    DcaConfig,
    FpConfig,
    FpDdcaParams,
    fp_ddca_backward,
    fp_ddca_forward,
    init_fp_params,
)
from models.head import (
    HeadParams,
    decode_boxes,
    init_head_params,
    occupancy_targets,
    toy_task_loss,
    toy_task_loss_backward,
)
from models.numkit import conv2d_backward, conv2d_forward
from models.optim import AdamWState, adamw_step
from models.params import ParamBundle, add_bundles, uniform_init
from models.view_transform import (
    DEFAULT_EXTRINSIC,
    CameraModel,
    DepthBins,
    LssParams,
    build_frustum,
    camera_bev_backward,
    camera_bev_forward,
    init_lss_params,
    rasterize_radar_depth,
)
from utils.config import config_from_dict, fingerprint, to_dict
from utils.errors import ConfigError, NumericError
from utils.logger import get_logger
from utils.tensor_io import load_checkpoint, save_checkpoint

FUSED_KINDS = ("fp-ddca", "conv")


@dataclass
class PipelineParams(ParamBundle):
    radar_kernel: np.ndarray
    radar_bias: np.ndarray
    lss: LssParams
    fuser: Optional[FpDdcaParams]
    head: HeadParams


@dataclass
class SceneInputs:
    """Everything one scene contributes to a forward pass."""
    radar_raw: np.ndarray
    camera_features: np.ndarray
    d_radar: Optional[np.ndarray]
    targets: np.ndarray
    boxes: list
    geometry: object


class FusionPipeline:
    def __init__(self, config, log_level=None):
        self.config = config
        self.logger = get_logger(__name__, log_level)
        g, c = config.grid, config.camera
        self.pcr = RangeSpec(g.x_min, g.x_max, g.y_min, g.y_max, g.z_min, g.z_max)
        self.grid = BevGrid.from_range(self.pcr, g.cell_size)
        self.voxel_spec = radar_voxel_spec(self.grid, g.z_min, g.z_max, config.radar.z_slab)
        self.camera = CameraModel(c.fx, c.fy, c.cx, c.cy, DEFAULT_EXTRINSIC.copy(), (c.image_rows, c.image_cols))
        self.bins = DepthBins(c.depth_bins, c.d_min, c.d_max)
        self.geometry = build_frustum(self.camera, self.bins, self.grid)
        f = config.fuser
        self.fp_config = FpConfig(DcaConfig(g.channels, f.heads, f.points), f.fp_layers, f.blocks_per_scale,
                                  "conv" if f.kind == "conv" else "ddca", f.scale_mode, f.merge)
        self.params = self.init_params()
        t = config.train
        self.state = AdamWState(t.lr, t.beta1, t.beta2, t.eps, t.weight_decay)
        self.epoch = 0
        self.losses = []
        self.grad_norms = []

    # --- Construction ---
    def init_params(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.config.seed, 7])))
        C = self.config.grid.channels
        raw = radar_channels(self.voxel_spec)
        fuser = None
        if self.config.fuser.kind in FUSED_KINDS:
            fuser = init_fp_params(self.fp_config, rng, self.grid.shape)
        return PipelineParams(
            radar_kernel=uniform_init(rng, raw, (C, raw, 1, 1)),
            radar_bias=np.zeros(C),
            lss=init_lss_params(self.config.lss.variant, C, self.bins.count, rng),
            fuser=fuser,
            head=init_head_params(C, rng),
        )

    def scene_spec(self):
        s = self.config.scenes
        return SceneSpec(
            seed=self.config.seed, counts=dict(s.counts), pcr=self.pcr,
            noise_sigma=s.noise_sigma, p_xray=s.p_xray, dropout=s.dropout,
            point_density=s.point_density, frames=self.config.radar.frames,
            frame_dt=s.frame_dt, ego_speed=s.ego_speed, camera=self.camera,
            camera_channels=self.config.grid.channels, encoder_seed=s.encoder_seed,
        )

    def train_scenes(self):
        return generate_scenes(self.scene_spec(), self.config.train.scenes, self.config.seed)

    def test_scenes(self):
        # disjoint seed block from the training scenes
        return generate_scenes(self.scene_spec(), self.config.train.test_scenes, self.config.seed + 1_000_000)

    def eval_config(self):
        e = self.config.eval
        return EvalConfig(dict(e.thresholds), RangeSpec(*e.roi), None, e.iou_mode, e.recall_points)

    # --- Inputs ---
    def check_scene(self, scene):
        expected = (self.config.grid.channels, *self.camera.image_size)
        if scene.camera_features.shape != expected:
            raise ConfigError(f"scene camera features {scene.camera_features.shape} do not match the pipeline's {expected}")
        if not np.allclose(scene.camera.extrinsic, self.camera.extrinsic) or \
                (scene.camera.fx, scene.camera.fy, scene.camera.cx, scene.camera.cy) != \
                (self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy):
            raise ConfigError("scene camera calibration does not match the pipeline camera")
        if len(scene.frames) < self.config.radar.frames:
            raise ConfigError(f"scene has {len(scene.frames)} sweeps, config stacks {self.config.radar.frames}")

    def prepare(self, scene, augment_seed=None):
        self.check_scene(scene)
        points = scene.stacked(self.config.radar.frames)
        boxes = list(scene.boxes)
        d_radar = None
        if self.config.lss.variant == "depth-supervised":
            d_radar = rasterize_radar_depth(filter_pcr(points, self.pcr), self.camera)
        geometry = self.geometry
        if augment_seed is not None and self.config.radar.augment:
            r = self.config.radar
            aug = AugmentConfig(r.rotation_range, r.scale_range, r.flip_prob)
            points, boxes, recorded = augment(points, boxes, augment_seed, aug)
            geometry = build_frustum(self.camera, self.bins, self.grid, recorded)
        points = filter_pcr(points, self.voxel_spec.effective_range)
        return SceneInputs(
            radar_raw=radar_to_bev(points, self.voxel_spec, self.grid),
            camera_features=scene.camera_features,
            d_radar=d_radar,
            targets=occupancy_targets(boxes, self.grid),
            boxes=boxes,
            geometry=geometry,
        )

    # --- Forward / backward ---
    def forward(self, params, inputs):
        kind = self.config.fuser.kind
        radar_bev, radar_cache = conv2d_forward(inputs.radar_raw, params.radar_kernel, params.radar_bias)
        camera_bev, camera_cache = camera_bev_forward(params.lss, inputs.camera_features, inputs.d_radar,
                                                      inputs.geometry)
        fuser_cache = None
        if kind in FUSED_KINDS:
            fused, fuser_cache = fp_ddca_forward(params.fuser, radar_bev, camera_bev, self.config.fuser.order)
        elif kind == "none-radar-only":
            fused = radar_bev
        else:
            fused = camera_bev
        loss, head_cache = toy_task_loss(params.head, fused, inputs.targets)
        maps = {"radar": radar_bev, "camera": camera_bev, "fused": fused, "logits": head_cache[2]}
        return loss, (radar_cache, camera_cache, fuser_cache, head_cache, maps)

    def backward(self, params, cache):
        """Returns (param grads, {modality: input-gradient norm})."""
        radar_cache, camera_cache, fuser_cache, head_cache, _ = cache
        head_grads, dfused = toy_task_loss_backward(1.0, head_cache)
        kind = self.config.fuser.kind
        fuser_grads = None
        zeros = np.zeros_like(dfused)
        if kind in FUSED_KINDS:
            fuser_grads, dradar, dcamera = fp_ddca_backward(dfused, fuser_cache)
        elif kind == "none-radar-only":
            dradar, dcamera = dfused, zeros
        else:
            dradar, dcamera = zeros, dfused
        _, dkernel, dbias = conv2d_backward(dradar, radar_cache)
        lss_grads, _, _ = camera_bev_backward(dcamera, camera_cache)
        grads = PipelineParams(dkernel, dbias, lss_grads, fuser_grads, head_grads)
        norms = {"radar": float(np.linalg.norm(dradar)), "camera": float(np.linalg.norm(dcamera))}
        return grads, norms

    def loss_and_grads(self, params, inputs):
        loss, cache = self.forward(params, inputs)
        grads, norms = self.backward(params, cache)
        return loss, grads, norms

    def batch_loss_and_grads(self, params, batch):
        """Mean loss and mean gradient over scenes, reduced in scene order."""
        total, grads = 0.0, None
        norms = {"radar": 0.0, "camera": 0.0}
        for inputs in batch:
            loss, g, n = self.loss_and_grads(params, inputs)
            total += loss
            grads = g if grads is None else add_bundles(grads, g)
            for k in norms:
                norms[k] += n[k]
        scale = 1.0 / len(batch)
        grads = grads.map_arrays(lambda _, a: a * scale)
        return total * scale, grads, {k: v * scale for k, v in norms.items()}

    def step(self, scenes):
        """One full-batch AdamW epoch; returns the epoch's pre-update mean loss."""
        batch = [self.prepare(s, augment_seed=(self.config.seed, self.epoch, i)) if self.config.radar.augment
                 else self.prepare(s) for i, s in enumerate(scenes)]
        return self.step_prepared(batch)

    def step_prepared(self, batch):
        loss, grads, norms = self.batch_loss_and_grads(self.params, batch)
        if not np.isfinite(loss) or not grads.all_finite():
            raise NumericError(
                f"non-finite loss {loss} at epoch {self.epoch + 1}; parameter norm {self.params.global_norm():.6g}"
            )
        self.params = adamw_step(self.params, grads, self.state)
        self.epoch += 1
        self.losses.append(loss)
        self.grad_norms.append(norms)
        self.logger.info("epoch %d loss=%.6f grad_norm=%.4g radar_in=%.4g camera_in=%.4g",
                         self.epoch, loss, grads.global_norm(), norms["radar"], norms["camera"])
        return loss

    def mean_loss(self, batch):
        return float(np.mean([self.forward(self.params, inputs)[0] for inputs in batch]))

    # --- Inference ---
    def feature_maps(self, inputs):
        return self.forward(self.params, inputs)[1][4]

    def detect(self, inputs, threshold=None):
        threshold = self.config.train.decode_threshold if threshold is None else threshold
        probs = expit(self.feature_maps(inputs)["logits"])
        return decode_boxes(probs, self.grid, threshold)

    def evaluate_scenes(self, scenes, bypass=False):
        """Detect on every scene and score against its boxes; ``bypass`` feeds
        the ground truth back as detections."""
        frames = []
        for scene in scenes:
            inputs = self.prepare(scene)
            found = [b.with_score(1.0) for b in inputs.boxes] if bypass else self.detect(inputs)
            frames.append((found, inputs.boxes))
        return evaluate_frames(frames, self.eval_config())

    # --- Checkpoints ---
    def manifest(self):
        return {
            "config": to_dict(self.config),
            "fingerprint": fingerprint(self.config),
            "epoch": self.epoch,
            "losses": list(self.losses),
            "grid": list(self.grid.shape),
            "order": self.config.fuser.order,
            "fp_layers": self.config.fuser.fp_layers,
        }

    def save(self, directory):
        return save_checkpoint(directory, self.params.named_arrays(), self.manifest())

    @classmethod
    def from_checkpoint(cls, directory, log_level=None):
        manifest, arrays = load_checkpoint(directory)
        pipeline = cls(config_from_dict(manifest["config"]), log_level)
        pipeline.params = pipeline.params.load_arrays(arrays)
        pipeline.epoch = manifest.get("epoch", 0)
        pipeline.losses = list(manifest.get("losses", []))
        return pipeline
