import json
import math
import random
from fractions import Fraction

import numpy as np
import pytest

from data.geometry import RangeSpec, RigidTransform
from evaluation.boxes import Box3D, read_jsonl, write_jsonl
from evaluation.metrics import (
    EvalConfig,
    average_precision,
    evaluate,
    evaluate_frames,
    filter_region,
    interpolated_ap,
    iou_3d,
    match_detections,
    rotated_iou_bev,
)
from utils.errors import ConfigError, ContractError


def car(x, y, w=2.0, l=2.0, theta=0.0, score=None, z=0.0, h=1.5):
    return Box3D(x, y, z, w, l, h, theta, "car", score)


def test_iou_identical_and_offset_squares():
    assert rotated_iou_bev(car(0, 0), car(0, 0)) == pytest.approx(1.0)
    assert rotated_iou_bev(car(0, 0), car(1, 0)) == pytest.approx(1 / 3)


def test_iou_is_symmetric(rng):
    for _ in range(20):
        a = car(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3, 2), theta=rng.uniform(-3, 3))
        b = car(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3, 2), theta=rng.uniform(-3, 3))
        assert rotated_iou_bev(a, b) == rotated_iou_bev(b, a)


def test_iou_invariant_to_joint_rigid_motion(rng):
    a = car(1.0, 0.5, 1.5, 3.0, 0.2)
    b = car(1.6, 0.1, 1.8, 2.5, -0.4)
    before = rotated_iou_bev(a, b)
    motion = RigidTransform.from_yaw(1.1, (7.0, -3.0, 0.0))
    after = rotated_iou_bev(motion.apply_box(a), motion.apply_box(b))
    assert abs(before - after) < 1e-10


@pytest.mark.slow
def test_rotated_square_matches_monte_carlo(rng):
    a = car(0.0, 0.0, 1.0, 1.0)
    b = car(0.0, 0.0, 1.0, 1.0, theta=math.pi / 4)
    samples = rng.uniform(-0.75, 0.75, size=(1_000_000, 2))
    in_a, in_b = a.contains_bev(samples), b.contains_bev(samples)
    estimate = np.sum(in_a & in_b) / np.sum(in_a | in_b)
    assert a.polygon().intersection(b.polygon()).area == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)
    exact = rotated_iou_bev(a, b)
    assert exact == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert abs(exact - estimate) < 2e-3


def random_car(rng, spread=0.7, score=None):
    x, y = rng.uniform(-spread, spread, 2)
    w, l = rng.uniform(0.5, 3.0, 2)
    return car(x, y, w, l, theta=rng.uniform(-math.pi, math.pi), score=score,
               z=rng.uniform(0.0, 1.0), h=rng.uniform(0.8, 2.0))


def joint_bounds(a, b):
    corners = np.vstack([a.corners_bev(), b.corners_bev()])
    return corners.min(axis=0), corners.max(axis=0)


def jittered_grid(rng, lo, hi, per_axis):
    """One uniform sample per cell of a per_axis × per_axis grid over [lo, hi]."""
    ii, jj = np.meshgrid(np.arange(per_axis), np.arange(per_axis), indexing="ij")
    cells = np.column_stack([ii.ravel(), jj.ravel()]) + rng.uniform(size=(per_axis * per_axis, 2))
    return lo + cells / per_axis * (hi - lo)


@pytest.mark.slow
def test_rotated_iou_matches_monte_carlo_on_random_pairs(rng):
    for _ in range(100):
        a, b = random_car(rng), random_car(rng)
        samples = jittered_grid(rng, *joint_bounds(a, b), 1000)
        in_a, in_b = a.contains_bev(samples), b.contains_bev(samples)
        estimate = np.sum(in_a & in_b) / np.sum(in_a | in_b)
        assert abs(rotated_iou_bev(a, b) - estimate) < 2e-3


def test_iou_3d_vertical_overlap():
    assert iou_3d(car(0, 0), car(0, 0)) == pytest.approx(1.0)
    assert iou_3d(car(0, 0, z=0.0), car(0, 0, z=1.5)) == 0.0
    assert iou_3d(car(0, 0, z=0.0), car(0, 0, z=0.75)) == pytest.approx(1 / 3)


def test_iou_3d_matches_voxel_volume_oracle(rng):
    for _ in range(20):
        a, b = random_car(rng), random_car(rng)
        lo, hi = joint_bounds(a, b)
        n = 600
        axis = [lo[k] + (np.arange(n) + 0.5) / n * (hi[k] - lo[k]) for k in range(2)]
        xy = np.column_stack([g.ravel() for g in np.meshgrid(*axis, indexing="ij")])
        z_lo, z_hi = min(a.bottom, b.bottom), max(a.top, b.top)
        z = z_lo + (np.arange(2000) + 0.5) / 2000 * (z_hi - z_lo)
        # the boxes are vertical prisms, so voxel counts factor into footprint × height
        xy_a, xy_b = a.contains_bev(xy), b.contains_bev(xy)
        z_a = (z >= a.bottom) & (z <= a.top)
        z_b = (z >= b.bottom) & (z <= b.top)
        both = np.sum(xy_a & xy_b) * np.sum(z_a & z_b)
        union = np.sum(xy_a) * np.sum(z_a) + np.sum(xy_b) * np.sum(z_b) - both
        assert abs(iou_3d(a, b) - both / union) < 5e-3


def test_degenerate_box_is_rejected():
    with pytest.raises(ContractError):
        rotated_iou_bev(car(0, 0, w=0.0), car(0, 0))


def test_roi_uses_box_centres():
    boxes = [car(10.0, 0.0), car(30.0, 0.0), car(10.0, 4.0)]
    assert filter_region(boxes, "roi", EvalConfig()) == boxes[:1]
    assert filter_region(boxes, "entire_area", EvalConfig()) == boxes
    limited = EvalConfig(ea_range=RangeSpec(0.0, 20.0, -10.0, 10.0))
    assert filter_region(boxes, "entire_area", limited) == [boxes[0], boxes[2]]


def test_roi_transform_moves_centres_first():
    config = EvalConfig(roi_transform=RigidTransform.from_yaw(0.0, (-20.0, 0.0, 0.0)))
    assert filter_region([car(30.0, 0.0)], "roi", config) == [car(30.0, 0.0)]


def test_single_hit_gives_full_ap():
    gts = [car(10, 0)]
    result = match_detections([car(10.2, 0, score=0.9)], gts, 0.5)
    assert result.tp.tolist() == [True]
    assert interpolated_ap(result.tp, result.num_gt) == 1.0


def test_higher_scored_miss_halves_ap():
    gts = [car(10, 0)]
    dets = [car(13, 0, score=0.9), car(10, 0, score=0.5)]
    result = match_detections(dets, gts, 0.5)
    assert result.tp.tolist() == [False, True]
    assert interpolated_ap(result.tp, result.num_gt) == pytest.approx(0.5)


def test_ap_absent_without_ground_truth():
    assert interpolated_ap([True], 0) is None
    assert interpolated_ap([], 3) == 0.0


def test_r11_interpolation():
    # recall 0.5 at precision 1: levels 0 .. 0.5 hit, 0.6 .. 1 miss
    assert interpolated_ap([True], 2, recall_points=11) == pytest.approx(6 / 11)


def test_iou_must_exceed_threshold():
    gts = [car(0, 0, l=4.0)]
    det = car(2.0, 0, l=4.0, score=1.0)
    # overlap 4 of union 12
    assert not match_detections([det], gts, 1 / 3 + 1e-12).tp.any()
    assert match_detections([det], gts, 1 / 3 - 1e-12).tp.all()


def test_each_ground_truth_matches_once():
    gts = [car(0, 0)]
    result = match_detections([car(0, 0, score=0.9), car(0, 0, score=0.8)], gts, 0.5)
    assert result.tp.tolist() == [True, False]
    assert (result.tp_count, result.fp_count, result.fn_count) == (1, 1, 0)


def test_detections_equal_to_ground_truth():
    gts = [Box3D(10, 0, 0, 1.8, 4.0, 1.5, 0.0, "car"),
           Box3D(6, 2, 0, 0.6, 0.8, 1.7, 0.0, "pedestrian"),
           Box3D(15, -2, 0, 0.7, 1.8, 1.6, 1.0, "cyclist")]
    report = evaluate([g.with_score(1.0) for g in gts], gts)
    for region in ("entire_area", "roi"):
        assert all(v == 1.0 for v in report.ap[region].values())
        assert report.mean_ap[region] == 1.0


def test_no_detections_scores_zero():
    gts = [Box3D(10, 0, 0, 1.8, 4.0, 1.5, 0.0, "car")]
    report = evaluate([], gts)
    assert report.ap["entire_area"]["car"] == 0.0
    assert report.ap["entire_area"]["pedestrian"] is None
    assert report.mean_ap["entire_area"] == 0.0


def test_unknown_label_is_rejected():
    with pytest.raises(ValueError, match="truck"):
        evaluate([], [Box3D(10, 0, 0, 1.8, 4.0, 1.5, 0.0, "truck")])


def test_detections_need_scores():
    gts = [car(10, 0)]
    with pytest.raises(ContractError):
        evaluate([car(10, 0)], gts)


def test_hand_computed_sheet(eval_sheet):
    gts = [Box3D.from_dict(d) for d in eval_sheet["ground_truth"]]
    dets = [Box3D.from_dict(d) for d in eval_sheet["detections"]]
    report = evaluate(dets, gts)
    expected = eval_sheet["expected"]
    for region in ("entire_area", "roi"):
        for label, ap in expected["ap"][region].items():
            assert report.ap[region][label] == pytest.approx(ap, abs=1e-12), (region, label)
        assert report.mean_ap[region] == pytest.approx(expected["mAP"][region], abs=1e-12)
    assert report.counts == expected["counts"]


def test_input_order_does_not_matter(eval_sheet):
    gts = [Box3D.from_dict(d) for d in eval_sheet["ground_truth"]]
    dets = [Box3D.from_dict(d) for d in eval_sheet["detections"]]
    reference = evaluate(dets, gts).to_json()
    shuffler = random.Random(5)
    for _ in range(5):
        shuffler.shuffle(dets)
        shuffler.shuffle(gts)
        assert evaluate(dets, gts).to_json() == reference


def test_frames_match_separately_but_rank_together():
    gt = car(10, 0)
    frames = [([car(10, 0, score=0.9)], [gt]), ([car(10, 0, score=0.8)], [])]
    report = evaluate_frames(frames)
    # the second detection has no ground truth in its own frame
    assert report.counts["entire_area"]["car"] == {"tp": 1, "fp": 1, "fn": 0}
    assert report.ap["entire_area"]["car"] == 1.0


def test_report_serialization(tmp_path, eval_sheet):
    gts = [Box3D.from_dict(d) for d in eval_sheet["ground_truth"]]
    report = evaluate([g.with_score(1.0) for g in gts], gts)
    report.extra = {"epoch": 3}
    report.save(tmp_path / "report.json")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["schema"] == 1 and data["epoch"] == 3 and data["recall_points"] == 40
    frame = report.as_frame()
    assert list(frame.index) == ["entire_area", "roi"]
    assert frame.loc["roi", "mAP"] == pytest.approx(100.0)


def test_boxes_jsonl_roundtrip(tmp_path):
    boxes = [car(1.0, 2.0, theta=0.5, score=0.25), Box3D(3, 4, 0, 0.6, 0.8, 1.7, -1.0, "pedestrian")]
    write_jsonl(tmp_path / "boxes.jsonl", boxes)
    assert read_jsonl(tmp_path / "boxes.jsonl") == boxes


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(thresholds={"car": 0.5, "pedestrian": 0.25, "cyclist": 1.5})
    with pytest.raises(ConfigError):
        EvalConfig(recall_points=20)
    with pytest.raises(ConfigError):
        EvalConfig(iou_mode="bev3")


def random_scene(rng):
    """Cars with jittered hits, unmatched ground truth and stray detections."""
    gts = [car(*rng.uniform([0.0, -8.0], [20.0, 8.0]), *rng.uniform(1.5, 3.0, 2), theta=rng.uniform(-1, 1))
           for _ in range(int(rng.integers(1, 7)))]
    dets = []
    for g in gts:
        if rng.uniform() < 0.7:
            dx, dy = rng.normal(0.0, 0.4, 2)
            dets.append(car(g.x + dx, g.y + dy, g.w, g.l, g.theta + rng.normal(0.0, 0.2)))
    for _ in range(int(rng.integers(0, 5))):
        dets.append(car(*rng.uniform([0.0, -8.0], [20.0, 8.0]), *rng.uniform(1.5, 3.0, 2)))
    scores = rng.permutation(len(dets)) + rng.uniform(0.1, 0.9, len(dets))
    return [d.with_score(float(s)) for d, s in zip(dets, scores)], gts


def brute_force_ap(dets, gts, threshold, recall_points):
    ranked = sorted(dets, key=lambda d: -d.score)
    used, hits = set(), 0
    curve = []
    for rank, det in enumerate(ranked, start=1):
        best, best_iou = None, threshold
        for j, gt in enumerate(gts):
            iou = rotated_iou_bev(det, gt)
            if j not in used and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            used.add(best)
            hits += 1
        curve.append((Fraction(hits, len(gts)), hits / rank))
    if recall_points == 40:
        levels = [Fraction(k, 40) for k in range(1, 41)]
    else:
        levels = [Fraction(k, 10) for k in range(11)]
    return sum(max([p for r, p in curve if r >= level], default=0.0) for level in levels) / len(levels)


@pytest.mark.parametrize("recall_points", [40, 11])
def test_ap_matches_brute_force_on_random_scenes(rng, recall_points):
    config = EvalConfig(recall_points=recall_points)
    for _ in range(50):
        dets, gts = random_scene(rng)
        expected = brute_force_ap(dets, gts, 0.5, recall_points)
        assert average_precision(dets, gts, "car", config) == pytest.approx(expected, abs=1e-12)


def test_top_scored_true_positive_never_lowers_ap(rng):
    config = EvalConfig()
    for _ in range(50):
        dets, gts = random_scene(rng)
        lonely = car(40.0, 0.0)
        gts = gts + [lonely]
        before = average_precision(dets, gts, "car", config)
        top = max((d.score for d in dets), default=0.0) + 1.0
        after = average_precision(dets + [lonely.with_score(top)], gts, "car", config)
        assert after >= before - 1e-12


def test_dropping_a_false_positive_never_lowers_ap(rng):
    config = EvalConfig()
    for _ in range(50):
        dets, gts = random_scene(rng)
        result = match_detections(dets, gts, 0.5)
        false_scores = result.scores[~result.tp]
        if not false_scores.size:
            continue
        before = average_precision(dets, gts, "car", config)
        kept = [d for d in dets if d.score != false_scores[0]]
        assert average_precision(kept, gts, "car", config) >= before - 1e-12
