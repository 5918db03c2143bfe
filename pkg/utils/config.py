# utils/config.py
"""Pipeline configuration: nested dataclass sections loaded from YAML.

``config/params.yaml`` holds the defaults; any file passed on the command line
is merged over them section by section. Every field is validated when the
config is built, raising ConfigError with the dotted key at fault.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from utils.errors import ConfigError

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "params.yaml"

FUSER_KINDS = ("fp-ddca", "conv", "none-radar-only", "none-camera-only")
FRAME_COUNTS = (1, 3, 5)


@dataclass(frozen=True)
class GridConfig:
    x_min: float = 0.0
    x_max: float = 12.8
    y_min: float = -6.4
    y_max: float = 6.4
    z_min: float = -3.0
    z_max: float = 2.0
    cell_size: float = 0.4
    channels: int = 8


@dataclass(frozen=True)
class RadarConfig:
    z_slab: float = 1.0
    frames: int = 1
    augment: bool = False
    rotation_range: tuple = (-0.39269908169872414, 0.39269908169872414)
    scale_range: tuple = (0.95, 1.05)
    flip_prob: float = 0.5


@dataclass(frozen=True)
class CameraConfig:
    image_rows: int = 16
    image_cols: int = 32
    fx: float = 16.0
    fy: float = 16.0
    cx: float = 16.0
    cy: float = 6.0
    depth_bins: int = 16
    d_min: float = 1.0
    d_max: float = 25.6


@dataclass(frozen=True)
class FuserConfig:
    kind: str = "fp-ddca"
    heads: int = 2
    points: int = 4
    fp_layers: int = 3
    blocks_per_scale: int = 2
    order: str = "RC"
    scale_mode: str = "dyadic"
    merge: str = "sum"


@dataclass(frozen=True)
class LssConfig:
    variant: str = "depth-context"


@dataclass(frozen=True)
class ScenesConfig:
    counts: dict = field(default_factory=lambda: {"car": 1, "pedestrian": 1, "cyclist": 1})
    noise_sigma: float = 0.1
    p_xray: float = 0.1
    dropout: float = 0.0
    point_density: float = 8.0
    frame_dt: float = 0.1
    ego_speed: float = 5.0
    encoder_seed: int = 1234


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    scenes: int = 32
    test_scenes: int = 8
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decode_threshold: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    thresholds: dict = field(default_factory=lambda: {"car": 0.5, "pedestrian": 0.25, "cyclist": 0.25})
    roi: tuple = (0.0, 25.0, -4.0, 4.0)
    iou_mode: str = "bev"
    recall_points: int = 40


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    radar: RadarConfig = field(default_factory=RadarConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    fuser: FuserConfig = field(default_factory=FuserConfig)
    lss: LssConfig = field(default_factory=LssConfig)
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)


# --- Building ---
def _coerce(key, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(current):
            raise ConfigError(f"{key}: expected a list of {len(current)} numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return dict(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _merge(section, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    known = {f.name for f in fields(section)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    updates = {}
    for name, value in data.items():
        current = getattr(section, name)
        key = prefix + name
        if is_dataclass(current):
            updates[name] = _merge(current, value, key + ".")
        else:
            updates[name] = _coerce(key, current, value)
    return replace(section, **updates)


def config_from_dict(data):
    config = _merge(PipelineConfig(), data or {})
    validate(config)
    return config


def load_config(path=None, overrides=None):
    """Defaults from params.yaml, merged with ``path`` and then ``overrides``
    (a mapping of dotted keys to values)."""
    config = _merge(PipelineConfig(), _read_yaml(DEFAULT_CONFIG_PATH))
    if path is not None:
        config = _merge(config, _read_yaml(path))
    for key, value in (overrides or {}).items():
        config = with_value(config, key, value, check=False)
    validate(config)
    return config


def _read_yaml(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return data or {}


def with_value(config, key, value, check=True):
    """Copy of ``config`` with the dotted ``key`` set to ``value``."""
    nested = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    updated = _merge(config, nested)
    if check:
        validate(updated)
    return updated


def get_value(config, key):
    value = config
    for part in key.split("."):
        if not hasattr(value, part):
            raise ConfigError(f"unknown config key '{key}'")
        value = getattr(value, part)
    return value


# --- Validation ---
def _require(ok, key, message):
    if not ok:
        raise ConfigError(f"{key}: {message}")


def validate(config):
    from data.geometry import RangeSpec
    from evaluation.boxes import CLASSES
    from models.fuser import DcaConfig, FpConfig

    g = config.grid
    try:
        RangeSpec(g.x_min, g.x_max, g.y_min, g.y_max, g.z_min, g.z_max)
    except ConfigError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    _require(g.cell_size > 0, "grid.cell_size", "must be positive")
    _require(g.channels >= 1, "grid.channels", "must be >= 1")
    rows = (g.x_max - g.x_min) / g.cell_size
    cols = (g.y_max - g.y_min) / g.cell_size
    _require(abs(rows - round(rows)) < 1e-9 and abs(cols - round(cols)) < 1e-9,
             "grid.cell_size", "must divide the x and y extents")

    r = config.radar
    _require(r.z_slab > 0, "radar.z_slab", "must be positive")
    _require(r.frames in FRAME_COUNTS, "radar.frames", f"must be one of {FRAME_COUNTS}")
    _require(0.0 <= r.flip_prob <= 1.0, "radar.flip_prob", "must lie in [0, 1]")

    c = config.camera
    _require(c.fx > 0 and c.fy > 0, "camera.fx", "focal lengths must be positive")
    _require(c.image_rows >= 1 and c.image_cols >= 1, "camera.image_rows", "image size must be positive")
    _require(c.depth_bins >= 2, "camera.depth_bins", "must be >= 2")
    _require(0 < c.d_min < c.d_max, "camera.d_min", "need 0 < d_min < d_max")

    f = config.fuser
    _require(f.kind in FUSER_KINDS, "fuser.kind", f"must be one of {FUSER_KINDS}")
    _require(f.order in ("RC", "CR"), "fuser.order", "must be RC or CR")
    try:
        fp = FpConfig(DcaConfig(g.channels, f.heads, f.points), f.fp_layers, f.blocks_per_scale,
                      "conv" if f.kind == "conv" else "ddca", f.scale_mode, f.merge)
    except ConfigError as exc:
        raise ConfigError(f"fuser: {exc}") from exc
    if f.kind in ("fp-ddca", "conv"):
        m = fp.grid_multiple
        _require(round(rows) % m == 0 and round(cols) % m == 0, "fuser.fp_layers",
                 f"grid {round(rows)}×{round(cols)} is not divisible by {m} for scales {fp.scales}")

    _require(config.lss.variant in ("vanilla", "depth-supervised", "depth-context"),
             "lss.variant", "must be vanilla, depth-supervised or depth-context")

    s = config.scenes
    for label, n in s.counts.items():
        _require(label in CLASSES, f"scenes.counts.{label}", "unknown class")
        _require(isinstance(n, int) and n >= 0, f"scenes.counts.{label}", "must be a non-negative integer")
    _require(0.0 <= s.p_xray <= 1.0, "scenes.p_xray", "must lie in [0, 1]")
    _require(0.0 <= s.dropout <= 1.0, "scenes.dropout", "must lie in [0, 1]")
    _require(s.noise_sigma >= 0, "scenes.noise_sigma", "must be >= 0")

    t = config.train
    _require(t.epochs >= 0, "train.epochs", "must be >= 0")
    _require(t.scenes >= 1, "train.scenes", "must be >= 1")
    _require(t.test_scenes >= 0, "train.test_scenes", "must be >= 0")
    _require(t.lr > 0, "train.lr", "must be positive")
    _require(0 <= t.beta1 < 1 and 0 <= t.beta2 < 1, "train.beta1", "betas must lie in [0, 1)")
    _require(t.eps > 0, "train.eps", "must be positive")
    _require(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    _require(0.0 <= t.decode_threshold < 1.0, "train.decode_threshold", "must lie in [0, 1)")

    e = config.eval
    for label in CLASSES:
        _require(label in e.thresholds, f"eval.thresholds.{label}", "missing")
    for label, v in e.thresholds.items():
        _require(label in CLASSES, f"eval.thresholds.{label}", "unknown class")
        _require(0.0 < v <= 1.0, f"eval.thresholds.{label}", "must lie in (0, 1]")
    _require(e.iou_mode in ("bev", "3d"), "eval.iou_mode", "must be bev or 3d")
    _require(e.recall_points in (11, 40), "eval.recall_points", "must be 11 or 40")
    _require(e.roi[0] < e.roi[1] and e.roi[2] < e.roi[3], "eval.roi", "min must be below max")
    return config


# --- Output ---
def to_dict(config):
    data = asdict(config)

    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return plain(data)


def dump_yaml(config):
    return yaml.safe_dump(to_dict(config), sort_keys=True, default_flow_style=False)


def fingerprint(config, exclude=()):
    """SHA-256 of the canonical JSON of the config without the ``exclude`` keys."""
    data = to_dict(config)
    for key in exclude:
        cursor = data
        *parents, last = key.split(".")
        for part in parents:
            cursor = cursor[part]
        cursor.pop(last, None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
