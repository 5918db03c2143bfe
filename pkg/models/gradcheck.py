# models/gradcheck.py
"""Finite-difference verification of hand-written backward passes."""
import numpy as np

from models.numkit import DiffOp, as_tensor, check_finite
from utils.errors import DimensionError
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_STEP = 1e-5
KINK_TOLERANCE = 1e-5
REFINEMENTS = (0.1, 0.01)
SCALE_FLOOR = 1e-8


def numeric_gradient(op, inputs, index, dout, step=DEFAULT_STEP, entries=None):
    """Central differences of <dout, op(inputs)> w.r.t. ``inputs[index]``.

    ``entries`` optionally restricts the estimate to a list of flat indices;
    the other entries of the result stay NaN.
    """
    x = inputs[index]
    grad = np.full(x.shape, np.nan)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    chosen = range(x.size) if entries is None else entries
    for k in chosen:
        orig = flat_x[k]
        flat_x[k] = orig + step
        plus = np.sum(dout * op.forward(*inputs)[0])
        flat_x[k] = orig - step
        minus = np.sum(dout * op.forward(*inputs)[0])
        flat_x[k] = orig
        flat_g[k] = (plus - minus) / (2.0 * step)
    return grad


def _refine(op, inputs, index, dout, step, k, analytic, scale, tolerance):
    """Relative error of entry ``k`` at the first finer step that agrees, else None."""
    for f in REFINEMENTS:
        n = numeric_gradient(op, inputs, index, dout, step * f, [k]).reshape(-1)[k]
        dev = abs(analytic - n) / scale
        if dev < tolerance:
            return float(dev)
    return None


def gradcheck(op, inputs, rng=None, step=DEFAULT_STEP, max_entries=None, report=None,
              kink_tolerance=KINK_TOLERANCE):
    """Max relative error between ``op.backward`` and central differences.

    The upstream gradient is random. For each input the error is
    max|a - g| / max(max|a|, max|g|, 1e-8) with ``g`` taken at ``step``.
    Inputs whose backward returns None are treated as non-differentiable.
    ``max_entries`` caps how many entries per input are checked.

    An entry off by ``kink_tolerance`` or more is re-estimated at ``step/10``
    and ``step/100``. When a finer step agrees, the entry counts at the finer
    error and a warning names it: a difference that straddles a bilinear cell
    boundary is wrong at ``step`` only. The return value uses these refined
    errors. When ``report`` is a dict it receives, per input, the error at
    ``step``, the refined error and the number of refined entries.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [as_tensor(x).copy() for x in inputs]
    out, cache = op.forward(*inputs)
    dout = rng.standard_normal(np.shape(out))
    grads = op.backward(dout, cache)
    if len(grads) != len(inputs):
        raise DimensionError(f"{op.name}: backward returned {len(grads)} grads for {len(inputs)} inputs")
    worst = 0.0
    for i, (x, g) in enumerate(zip(inputs, grads)):
        if g is None or x.size == 0:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise DimensionError(f"{op.name}: grad {i} has shape {g.shape}, input has {x.shape}")
        check_finite(f"{op.name} analytic grad {i}", g)
        entries = None
        if max_entries is not None and x.size > max_entries:
            entries = np.sort(rng.choice(x.size, size=max_entries, replace=False))
        numeric = numeric_gradient(op, inputs, i, dout, step, entries).reshape(-1)
        flat_g = g.reshape(-1)
        checked = np.flatnonzero(~np.isnan(numeric))
        a, n = flat_g[checked], numeric[checked]
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), SCALE_FLOOR)
        dev = np.abs(a - n) / scale
        err = float(dev.max())
        refined = 0
        for j in np.flatnonzero(dev >= kink_tolerance):
            finer = _refine(op, inputs, i, dout, step, checked[j], a[j], scale, kink_tolerance)
            if finer is None:
                continue
            logger.warning("%s input %d entry %d: error %.3e at step %g, %.3e at a finer step",
                           op.name, i, checked[j], dev[j], step, finer)
            dev[j] = finer
            refined += 1
        if report is not None:
            report[i] = {"error": err, "refined_error": float(dev.max()), "refined_entries": refined}
        worst = max(worst, float(dev.max()))
    return worst


def bundle_diffop(name, forward, backward, template, n_maps):
    """Expose a ``forward(params, *maps)`` module as a DiffOp over maps + param arrays.

    ``backward(dout, cache)`` must return ``(param_grads, *map_grads)``. The
    DiffOp inputs are the ``n_maps`` maps followed by every array of
    ``template`` in ``named_arrays`` order.
    """
    names = [key for key, _ in template.named_arrays()]

    def fwd(*arrays):
        maps, flat = arrays[:n_maps], arrays[n_maps:]
        params = template.load_arrays(dict(zip(names, flat)))
        return forward(params, *maps)

    def bwd(dout, cache):
        param_grads, *map_grads = backward(dout, cache)
        return (*map_grads, *[a for _, a in param_grads.named_arrays()])

    return DiffOp(name, fwd, bwd)


def bundle_inputs(maps, params):
    return [*maps, *[a for _, a in params.named_arrays()]]
