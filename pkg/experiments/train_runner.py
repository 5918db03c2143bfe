# experiments/train_runner.py
import json
from pathlib import Path

import pandas as pd

from data.scene_io import load_scene, save_scene, scene_dirs
from data.synthetic import generate_scenes
from pipelines.fusion_pipeline import FusionPipeline
from utils.config import fingerprint
from utils.errors import ContractError
from utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_DIR = "checkpoint"
LOSS_CURVE_JSON = "loss_curve.json"
LOSS_CURVE_CSV = "loss_curve.csv"
EVAL_REPORT = "eval_report.json"
SPLITS = ("test", "train")


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_gen_scenes(config, out, count=None, first_seed=None):
    """Write ``count`` scene directories (scene_0000, ...) generated from the config's scene defaults."""
    pipeline = FusionPipeline(config)
    count = config.train.scenes if count is None else count
    first_seed = config.seed if first_seed is None else first_seed
    out = Path(out)
    written = []
    for i, scene in enumerate(generate_scenes(pipeline.scene_spec(), count, first_seed)):
        written.append(str(save_scene(scene, out / f"scene_{i:04d}")))
    logger.info("wrote %d scenes to %s", len(written), out)
    return written


def train_pipeline(pipeline, scenes, epochs):
    """Run ``epochs`` full-batch epochs; returns the mean loss before the first update."""
    batch = [pipeline.prepare(s) for s in scenes]
    initial = pipeline.mean_loss(batch)
    logger.info("initial loss %.6f on %d scenes", initial, len(scenes))
    for _ in range(epochs):
        if pipeline.config.radar.augment:
            pipeline.step(scenes)
        else:
            pipeline.step_prepared(batch)
    return initial


def loss_curve(pipeline, initial):
    return {
        "schema": 1,
        "seed": pipeline.config.seed,
        "fingerprint": fingerprint(pipeline.config),
        "scenes": pipeline.config.train.scenes,
        "epochs": pipeline.epoch,
        "initial_loss": initial,
        "final_loss": pipeline.losses[-1] if pipeline.losses else initial,
        "losses": list(pipeline.losses),
        "grad_norms": [dict(n) for n in pipeline.grad_norms],
    }


def cmd_train(config, out, log_level=None):
    """Train on the config's scenes, then write the checkpoint and the loss curve (JSON and CSV)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline = FusionPipeline(config, log_level)
    initial = train_pipeline(pipeline, pipeline.train_scenes(), config.train.epochs)
    pipeline.save(out / CHECKPOINT_DIR)
    curve = loss_curve(pipeline, initial)
    write_json(out / LOSS_CURVE_JSON, curve)
    frame = pd.DataFrame({
        "epoch": range(1, pipeline.epoch + 1),
        "loss": pipeline.losses,
        "radar_grad_norm": [n["radar"] for n in pipeline.grad_norms],
        "camera_grad_norm": [n["camera"] for n in pipeline.grad_norms],
    })
    frame.to_csv(out / LOSS_CURVE_CSV, index=False, float_format="%.17g")
    logger.info("trained %d epochs: loss %.6f -> %.6f", pipeline.epoch, initial, curve["final_loss"])
    return curve


def load_scene_set(scenes_dir):
    scenes_dir = Path(scenes_dir)
    if not scenes_dir.is_dir():
        raise ContractError(f"scene directory not found: {scenes_dir}")
    return [load_scene(d) for d in scene_dirs(scenes_dir)]


def cmd_evaluate(checkpoint, out=None, scenes_dir=None, split="test", bypass=False, log_level=None):
    """Evaluate a checkpoint on scene directories, or on its config's generated
    ``split`` scenes; ``bypass`` scores the ground truth against itself."""
    if split not in SPLITS:
        raise ValueError(f"unknown split '{split}', expected one of {SPLITS}")
    pipeline = FusionPipeline.from_checkpoint(checkpoint, log_level)
    if scenes_dir is not None:
        scenes = load_scene_set(scenes_dir)
    elif split == "train":
        scenes = pipeline.train_scenes()
    else:
        scenes = pipeline.test_scenes()
    if not scenes:
        raise ContractError("empty test set")
    report = pipeline.evaluate_scenes(scenes, bypass=bypass)
    report.extra = {
        "fingerprint": fingerprint(pipeline.config),
        "epoch": pipeline.epoch,
        "scenes": len(scenes),
        "bypass": bypass,
    }
    logger.info("evaluation on %d scenes (AP %%):\n%s", len(scenes), report.as_frame().round(2).to_string())
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        report.save(Path(out) / EVAL_REPORT)
    return report
