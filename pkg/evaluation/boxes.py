# evaluation/boxes.py
"""Oriented 3D boxes and their JSON-lines form."""
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from shapely.geometry import Polygon

CLASSES = ("car", "pedestrian", "cyclist")


def normalize_angle(theta):
    """Map an angle into (-pi, pi]."""
    theta = math.remainder(float(theta), 2.0 * math.pi)
    return math.pi if theta == -math.pi else theta


@dataclass(frozen=True)
class Box3D:
    """Centre (x, y, z), extents (w, l, h) and yaw about the vertical axis.

    ``l`` runs along the heading (local x), ``w`` across it (local y).
    """
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float = 0.0
    label: str = "car"
    score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def bev_area(self):
        return self.w * self.l

    @property
    def volume(self):
        return self.w * self.l * self.h

    @property
    def bottom(self):
        return self.z - 0.5 * self.h

    @property
    def top(self):
        return self.z + 0.5 * self.h

    def is_degenerate(self):
        return not (self.w > 0 and self.l > 0 and self.h > 0)

    def corners_bev(self):
        """Footprint corners (4×2), counter-clockwise."""
        local = np.array([
            [0.5 * self.l, 0.5 * self.w],
            [-0.5 * self.l, 0.5 * self.w],
            [-0.5 * self.l, -0.5 * self.w],
            [0.5 * self.l, -0.5 * self.w],
        ])
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def corners_3d(self):
        bev = self.corners_bev()
        low = np.column_stack([bev, np.full(4, self.bottom)])
        high = np.column_stack([bev, np.full(4, self.top)])
        return np.vstack([low, high])

    def polygon(self):
        return Polygon(self.corners_bev())

    def contains_bev(self, xy):
        """Mask of the (M, 2) points that fall inside the footprint."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xy[:, 0] - self.x, xy[:, 1] - self.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= 0.5 * self.l) & (np.abs(v) <= 0.5 * self.w)

    def with_score(self, score):
        return replace(self, score=score)

    def to_dict(self):
        data = asdict(self)
        data["class"] = data.pop("label")
        if data["score"] is None:
            data.pop("score")
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        label = data.pop("class", data.pop("label", None))
        if label is None:
            raise ValueError("box record has no 'class' field")
        return cls(
            x=float(data["x"]), y=float(data["y"]), z=float(data["z"]),
            w=float(data["w"]), l=float(data["l"]), h=float(data["h"]),
            theta=float(data.get("theta", 0.0)), label=label,
            score=None if data.get("score") is None else float(data["score"]),
        )


def write_jsonl(path, boxes):
    with open(path, "w") as f:
        for box in boxes:
            f.write(json.dumps(box.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path):
    boxes = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            boxes.append(Box3D.from_dict(json.loads(line)))
    return boxes
