# experiments/gradcheck_suite.py
"""Finite-difference checks for every differentiable op, on tiny random instances."""
from dataclasses import dataclass

import numpy as np

from data.geometry import BevGrid
from models import numkit
from models.fuser import (
    DcaConfig,
    FpConfig,
    conv_fuser_backward,
    conv_fuser_forward,
    dca_backward,
    dca_forward,
    ddca_backward,
    ddca_forward,
    fp_ddca_backward,
    fp_ddca_forward,
    init_conv_fuser_params,
    init_dca_params,
    init_ddca_params,
    init_fp_params,
)
from models.gradcheck import bundle_diffop, bundle_inputs, gradcheck
from models.head import init_head_params, toy_task_loss, toy_task_loss_backward
from models.numkit import DiffOp
from models.params import ParamBundle, randomize
from models.view_transform import (
    CameraModel,
    DepthBins,
    build_frustum,
    camera_bev_backward,
    camera_bev_forward,
    init_lss_params,
    splat_to_bev_backward,
    splat_to_bev_forward,
)
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_TOLERANCE = 1e-5


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# --- Primitive ops ---
def case_linear(rng):
    op = DiffOp("linear", numkit.linear_forward, numkit.linear_backward)
    return op, [_rand(rng, 3, 4), _rand(rng, 4, 2), _rand(rng, 2)]


def case_softmax(rng):
    op = DiffOp("softmax", numkit.softmax_forward, lambda d, c: (numkit.softmax_backward(d, c),))
    return op, [_rand(rng, 8)]


def case_bilinear(rng):
    op = DiffOp("bilinear_sample", numkit.bilinear_sample_forward, numkit.bilinear_sample_backward)
    coords = rng.uniform(-1.0, 5.0, size=(6, 2))
    return op, [_rand(rng, 2, 4, 5), coords]


def case_conv2d(rng):
    op = DiffOp("conv2d", numkit.conv2d_forward, numkit.conv2d_backward)
    return op, [_rand(rng, 2, 5, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)]


def case_avgpool(rng):
    op = DiffOp("avgpool2", lambda x: numkit.avgpool_forward(x, 2),
                lambda d, c: (numkit.avgpool_backward(d, c),))
    return op, [_rand(rng, 2, 4, 6)]


def case_upsample(rng):
    op = DiffOp("upsample_nearest", lambda x: numkit.upsample_nearest_forward(x, 2),
                lambda d, c: (numkit.upsample_nearest_backward(d, c),))
    return op, [_rand(rng, 2, 3, 3)]


def case_layer_norm(rng):
    op = DiffOp("layer_norm", numkit.layer_norm_forward, numkit.layer_norm_backward)
    return op, [_rand(rng, 5, 4), _rand(rng, 4), _rand(rng, 4)]


def case_gelu(rng):
    op = DiffOp("gelu", numkit.gelu_forward, lambda d, c: (numkit.gelu_backward(d, c),))
    return op, [_rand(rng, 3, 5)]


def case_bce(rng):
    op = DiffOp("bce_with_logits", numkit.bce_with_logits_forward,
                lambda d, c: (numkit.bce_with_logits_backward(d, c), None))
    return op, [_rand(rng, 3, 4), (rng.uniform(size=(3, 4)) > 0.5).astype(float)]


# --- Fuser ---
def tiny_dca_config():
    return DcaConfig(channels=4, heads=2, points=3)


def case_dca(rng):
    params = randomize(init_dca_params(tiny_dca_config(), rng), rng)
    op = bundle_diffop("dca", dca_forward, dca_backward, params, 2)
    return op, bundle_inputs([_rand(rng, 4, 5, 5), _rand(rng, 4, 5, 5)], params)


def case_ddca(rng):
    params = randomize(init_ddca_params(DcaConfig(4, 2, 2), rng), rng, scale=0.3)
    op = bundle_diffop("ddca", ddca_forward, ddca_backward, params, 2)
    return op, bundle_inputs([_rand(rng, 4, 4, 4), _rand(rng, 4, 4, 4)], params)


def case_fp_ddca(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=2, blocks_per_scale=1)
    params = randomize(init_fp_params(config, rng, (4, 4)), rng, scale=0.3)
    op = bundle_diffop("fp_ddca", lambda p, r, c: fp_ddca_forward(p, r, c, "RC"), fp_ddca_backward, params, 2)
    return op, bundle_inputs([_rand(rng, 4, 4, 4), _rand(rng, 4, 4, 4)], params)


def case_conv_fuser(rng):
    params = randomize(init_conv_fuser_params(3, rng), rng)
    op = bundle_diffop("conv_fuser", conv_fuser_forward, conv_fuser_backward, params, 2)
    return op, bundle_inputs([_rand(rng, 3, 4, 4), _rand(rng, 3, 4, 4)], params)


# --- View transform ---
def tiny_view_setup():
    camera = CameraModel(3.0, 3.0, 3.0, 2.0, image_size=(4, 6))
    grid = BevGrid(0.0, -4.0, 2.0, 4, 4)
    return camera, build_frustum(camera, DepthBins(3, 1.0, 7.0), grid)


def _lss_case(variant):
    def build(rng):
        camera, geometry = tiny_view_setup()
        params = randomize(init_lss_params(variant, 3, 3, rng), rng)
        maps = [_rand(rng, 3, *camera.image_size)]
        if variant == "depth-supervised":
            maps.append(rng.uniform(0.0, 8.0, size=(1, *camera.image_size)))
            backward = camera_bev_backward
        else:
            def backward(d, c):
                return camera_bev_backward(d, c)[:2]

        def forward(p, x, d_radar=None):
            return camera_bev_forward(p, x, d_radar, geometry)

        op = bundle_diffop(f"lss_{variant}", forward, backward, params, len(maps))
        return op, bundle_inputs(maps, params)
    return build


def case_splat(rng):
    _, geometry = tiny_view_setup()
    op = DiffOp("splat_to_bev", lambda f: splat_to_bev_forward(f, geometry),
                lambda d, c: (splat_to_bev_backward(d, c),))
    return op, [_rand(rng, 2, *geometry.cell.shape)]


# --- Head ---
def case_toy_head(rng):
    params = randomize(init_head_params(4, rng), rng)
    targets = (rng.uniform(size=(3, 4, 4)) > 0.7).astype(float)
    op = bundle_diffop("toy_head", lambda p, f: toy_task_loss(p, f, targets), toy_task_loss_backward, params, 1)
    return op, bundle_inputs([_rand(rng, 4, 4, 4)], params)


@dataclass
class HeadOnFuser(ParamBundle):
    fuser: object
    head: object


def case_head_fuser(rng):
    config = FpConfig(DcaConfig(4, 2, 2), layers=2, blocks_per_scale=1)
    params = randomize(HeadOnFuser(init_fp_params(config, rng, (4, 4)), init_head_params(4, rng)), rng, scale=0.3)
    targets = (rng.uniform(size=(3, 4, 4)) > 0.7).astype(float)

    def forward(p, radar, camera):
        fused, fuser_cache = fp_ddca_forward(p.fuser, radar, camera, "RC")
        loss, head_cache = toy_task_loss(p.head, fused, targets)
        return loss, (fuser_cache, head_cache)

    def backward(dloss, cache):
        fuser_cache, head_cache = cache
        head_grads, dfused = toy_task_loss_backward(dloss, head_cache)
        fuser_grads, dradar, dcamera = fp_ddca_backward(dfused, fuser_cache)
        return HeadOnFuser(fuser_grads, head_grads), dradar, dcamera

    op = bundle_diffop("head_on_fuser", forward, backward, params, 2)
    return op, bundle_inputs([_rand(rng, 4, 4, 4), _rand(rng, 4, 4, 4)], params)


REGISTRY = {
    "linear": case_linear,
    "softmax": case_softmax,
    "bilinear_sample": case_bilinear,
    "conv2d": case_conv2d,
    "avgpool2": case_avgpool,
    "upsample_nearest": case_upsample,
    "layer_norm": case_layer_norm,
    "gelu": case_gelu,
    "bce_with_logits": case_bce,
    "dca": case_dca,
    "ddca": case_ddca,
    "fp_ddca": case_fp_ddca,
    "conv_fuser": case_conv_fuser,
    "lss_vanilla": _lss_case("vanilla"),
    "lss_depth_supervised": _lss_case("depth-supervised"),
    "lss_depth_context": _lss_case("depth-context"),
    "splat_to_bev": case_splat,
    "toy_head": case_toy_head,
    "head_on_fuser": case_head_fuser,
}


def run_suite(registry=None, instances=20, seed=0, tolerance=DEFAULT_TOLERANCE, max_entries=3):
    """Check every registered op on ``instances`` random draws; JSON-ready summary.

    ``max_error`` is taken at the default step; ``refined_error`` counts
    kink entries at the finer step that explains them and decides the pass.
    """
    registry = REGISTRY if registry is None else registry
    if not registry:
        logger.warning("gradcheck registry is empty; nothing was verified")
    ops = {}
    for k, (name, build) in enumerate(sorted(registry.items())):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        worst, refined, refined_entries = 0.0, 0.0, 0
        for _ in range(instances):
            op, inputs = build(rng)
            report = {}
            refined = max(refined, gradcheck(op, inputs, rng=rng, max_entries=max_entries,
                                             report=report, kink_tolerance=tolerance))
            for per_input in report.values():
                worst = max(worst, per_input["error"])
                refined_entries += per_input["refined_entries"]
        passed = bool(refined < tolerance)
        ops[name] = {"max_error": worst, "refined_error": refined, "refined_entries": refined_entries,
                     "instances": instances, "passed": passed}
        log = logger.info if passed else logger.error
        log("gradcheck %-22s max rel. error %.3e %s", name, worst, "ok" if passed else "FAILED")
        if refined_entries:
            logger.warning("gradcheck %-22s %d kink entries refined; error %.3e -> %.3e",
                           name, refined_entries, worst, refined)
    return {
        "schema": 1,
        "tolerance": tolerance,
        "ops": ops,
        "failed": sorted(name for name, r in ops.items() if not r["passed"]),
        "passed": all(r["passed"] for r in ops.values()),
    }
