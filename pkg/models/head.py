# models/head.py
"""Toy occupancy head: per-cell, per-class logits from the fused BEV map,
trained with mean BCE and decoded into boxes by connected components."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from evaluation.boxes import CLASSES, Box3D
from models.numkit import (
    as_tensor,
    bce_with_logits_backward,
    bce_with_logits_forward,
    conv2d_backward,
    conv2d_forward,
)
from models.params import ParamBundle, uniform_init
from utils.errors import DimensionError

GROUND_Z = -1.0
CLASS_HEIGHTS = {"car": 1.6, "pedestrian": 1.7, "cyclist": 1.5}


@dataclass
class HeadParams(ParamBundle):
    kernel: np.ndarray
    bias: np.ndarray


def init_head_params(channels, rng, classes=len(CLASSES)):
    return HeadParams(uniform_init(rng, channels, (classes, channels, 1, 1)), np.zeros(classes))


def occupancy_targets(boxes, grid, classes=CLASSES):
    """K×rows×cols map, 1 where a cell centre lies inside a box of class k."""
    targets = np.zeros((len(classes), grid.rows, grid.cols))
    centers = grid.cell_centers().reshape(-1, 2)
    for box in boxes:
        if box.label not in classes:
            raise ValueError(f"unknown class label '{box.label}'")
        inside = box.contains_bev(centers).reshape(grid.rows, grid.cols)
        targets[classes.index(box.label)][inside] = 1.0
    return targets


def head_forward(params, fused):
    return conv2d_forward(fused, params.kernel, params.bias)


def toy_task_loss(params, fused, targets):
    """Mean BCE of the head logits against occupancy targets → (loss, cache)."""
    fused, targets = as_tensor(fused), as_tensor(targets)
    logits, conv_cache = head_forward(params, fused)
    if logits.shape != targets.shape:
        raise DimensionError(f"head output {logits.shape} does not match targets {targets.shape}")
    loss, bce_cache = bce_with_logits_forward(logits, targets)
    return loss, (conv_cache, bce_cache, logits)


def toy_task_loss_backward(dloss, cache):
    """Returns (head grads, d fused)."""
    conv_cache, bce_cache, _ = cache
    dlogits = bce_with_logits_backward(dloss, bce_cache)
    dfused, dkernel, dbias = conv2d_backward(dlogits, conv_cache)
    return HeadParams(dkernel, dbias), dfused


def occupancy_probs(params, fused):
    return expit(head_forward(params, fused)[0])


def decode_boxes(probs, grid, threshold=0.5, classes=CLASSES, ground_z=GROUND_Z):
    """Threshold each class map, label 4-connected components and fit one
    axis-aligned box per component, scored by its mean probability."""
    probs = as_tensor(probs)
    if probs.shape != (len(classes), grid.rows, grid.cols):
        raise DimensionError(f"probability map {probs.shape} does not match {len(classes)} classes on grid {grid.shape}")
    detections = []
    for k, label in enumerate(classes):
        components, count = ndimage.label(probs[k] > threshold)
        for index, region in enumerate(ndimage.find_objects(components), start=1):
            rows, cols = region
            mask = components[region] == index
            score = float(probs[k][region][mask].mean())
            h = CLASS_HEIGHTS.get(label, 1.5)
            detections.append(Box3D(
                x=grid.x_min + 0.5 * (rows.start + rows.stop) * grid.cell_size,
                y=grid.y_min + 0.5 * (cols.start + cols.stop) * grid.cell_size,
                z=ground_z + 0.5 * h,
                w=(cols.stop - cols.start) * grid.cell_size,
                l=(rows.stop - rows.start) * grid.cell_size,
                h=h, theta=0.0, label=label, score=score,
            ))
    return detections
