# models/optim.py
"""AdamW with decoupled weight decay over parameter bundles."""
from dataclasses import dataclass, field

import numpy as np

from utils.errors import DimensionError

# Vehicle-scale default; desk-scale training overrides it from config.
DEFAULT_LR = 1e-4


@dataclass
class AdamWState:
    """Moments and step counter. The counter is a Python int; runs are far below 2**31 steps."""
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(theta, grad, m, v, step, state):
    """One AdamW update of a single array; returns (theta, m, v)."""
    if theta.shape != grad.shape or theta.shape != m.shape:
        raise DimensionError(f"param {theta.shape}, grad {grad.shape}, moment {m.shape} misaligned")
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    decayed = theta - state.lr * state.weight_decay * theta if state.weight_decay else theta
    return decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), m, v


def adamw_step(params, grads, state):
    """Apply one AdamW step to every array of ``params``; mutates ``state``.

    Weight decay is applied to the parameters directly, not through the
    moments. Returns the updated bundle.
    """
    grad_arrays = dict(grads.named_arrays())
    state.step += 1
    step = state.step

    def update(name, theta):
        if name not in grad_arrays:
            raise DimensionError(f"no gradient for parameter '{name}'")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        new_theta, state.m[name], state.v[name] = adamw_update(theta, grad_arrays[name], m, v, step, state)
        return new_theta

    return params.map_arrays(update)
