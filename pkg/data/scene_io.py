# data/scene_io.py
"""Scene directories: points.csv, boxes.jsonl, camera.json, camfeat.bin.

Multi-sweep scenes add ``sweep_<i>.csv`` per past sweep (oldest first) and
``poses.json`` with the world←ego translation of every sweep.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from data.geometry import RigidTransform, read_points_csv, stack_frames, write_points_csv
from evaluation.boxes import read_jsonl, write_jsonl
from models.view_transform import CameraModel
from utils.errors import ContractError
from utils.tensor_io import load_tensor, save_tensor

REQUIRED_FILES = ("points.csv", "boxes.jsonl", "camera.json", "camfeat.bin")


@dataclass
class SceneRecord:
    """A scene as read back from disk."""
    boxes: list
    frames: list
    camera: CameraModel
    camera_features: np.ndarray

    @property
    def points(self):
        return self.frames[-1][0]

    def stacked(self, k):
        return stack_frames(self.frames, k)


def save_scene(scene, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    *past, (points, _) = scene.frames
    write_points_csv(directory / "points.csv", points)
    for i, (sweep, _) in enumerate(past):
        write_points_csv(directory / f"sweep_{i}.csv", sweep)
    if past:
        poses = [pose.matrix().tolist() for _, pose in scene.frames]
        (directory / "poses.json").write_text(json.dumps(poses, indent=2))
    write_jsonl(directory / "boxes.jsonl", scene.boxes)
    scene.camera.save(directory / "camera.json")
    save_tensor(directory / "camfeat.bin", scene.camera_features)
    return directory


def load_scene(directory):
    directory = Path(directory)
    missing = [name for name in REQUIRED_FILES if not (directory / name).exists()]
    if missing:
        raise ContractError(f"{directory}: missing scene files {missing}")
    points = read_points_csv(directory / "points.csv")
    poses_path = directory / "poses.json"
    if poses_path.exists():
        matrices = [np.asarray(m, dtype=np.float64) for m in json.loads(poses_path.read_text())]
        poses = [RigidTransform(m[:3, :3], m[:3, 3]) for m in matrices]
        sweeps = [read_points_csv(directory / f"sweep_{i}.csv") for i in range(len(poses) - 1)]
        frames = list(zip(sweeps + [points], poses))
    else:
        frames = [(points, RigidTransform.identity())]
    return SceneRecord(
        boxes=read_jsonl(directory / "boxes.jsonl"),
        frames=frames,
        camera=CameraModel.load(directory / "camera.json"),
        camera_features=load_tensor(directory / "camfeat.bin"),
    )


def scene_dirs(root):
    """Scene subdirectories of ``root`` in sorted order."""
    return sorted(p for p in Path(root).iterdir() if (p / "points.csv").exists())
