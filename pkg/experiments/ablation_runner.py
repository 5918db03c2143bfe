# experiments/ablation_runner.py
"""Train and evaluate one row per setting of an ablation axis.

Every row shares the seed and the train/test scenes; only the config key of
the axis differs, which the per-row fingerprint (taken without that key)
makes checkable.
"""
from pathlib import Path

import pandas as pd

from experiments.train_runner import train_pipeline, write_json
from pipelines.fusion_pipeline import FusionPipeline
from utils.config import fingerprint, with_value
from utils.errors import ContractError
from utils.logger import get_logger

logger = get_logger(__name__)

AXES = {
    "fuser": ("fuser.kind", ("fp-ddca", "conv")),
    "fp-layers": ("fuser.fp_layers", (1, 2, 3)),
    "lss": ("lss.variant", ("depth-supervised", "vanilla", "depth-context")),
    "order": ("fuser.order", ("RC", "CR")),
    "frames": ("radar.frames", (1, 3, 5)),
    "modality": ("fuser.kind", ("fp-ddca", "none-radar-only", "none-camera-only")),
}


def axis_configs(axis, base):
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis '{axis}', expected one of {sorted(AXES)}")
    key, values = AXES[axis]
    return key, [(value, with_value(base, key, value)) for value in values]


def shared_scenes(configs):
    # sweeps are generated for the deepest frame stack so every row sees the same scenes
    deepest = max(configs, key=lambda c: c.radar.frames)
    source = FusionPipeline(deepest)
    train, test = source.train_scenes(), source.test_scenes()
    if not test:
        raise ContractError("empty test set")
    return train, test


def cmd_ablate(axis, base, out=None, log_level=None):
    key, settings = axis_configs(axis, base)
    train, test = shared_scenes([config for _, config in settings])
    scene_seeds = {"train": [s.spec.seed for s in train], "test": [s.spec.seed for s in test]}
    rows = []
    for value, config in settings:
        logger.info("ablation %s: %s = %s", axis, key, value)
        pipeline = FusionPipeline(config, log_level)
        initial = train_pipeline(pipeline, train, config.train.epochs)
        report = pipeline.evaluate_scenes(test)
        rows.append({
            "value": value,
            "fingerprint": fingerprint(config, exclude=(key,)),
            "config_fingerprint": fingerprint(config),
            "seed": config.seed,
            "scene_seeds": scene_seeds,
            "initial_loss": initial,
            "final_loss": pipeline.losses[-1] if pipeline.losses else initial,
            "ap": report.ap,
            "mAP": report.mean_ap,
        })
    result = {"schema": 1, "axis": axis, "key": key, "values": [r["value"] for r in rows], "rows": rows}
    table = ablation_table(result)
    logger.info("ablation %s (mAP %%):\n%s", axis, table.round(2).to_string(index=False))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"ablation_{axis}.json", result)
        table.to_csv(out / f"ablation_{axis}.csv", index=False, float_format="%.17g")
    return result


def ablation_table(result):
    """Side-by-side mAP (percent) per row, EA and RoI."""
    def pct(v):
        return None if v is None else 100.0 * v

    return pd.DataFrame([
        {
            result["key"]: row["value"],
            "mAP_entire_area": pct(row["mAP"]["entire_area"]),
            "mAP_roi": pct(row["mAP"]["roi"]),
            "final_loss": row["final_loss"],
        }
        for row in result["rows"]
    ])
