# models/params.py
"""Learnable parameter bundles.

A bundle is a dataclass whose fields are float64 arrays, nested bundles,
lists of bundles, or plain (non-learnable) settings. Gradient buffers are
bundles of the same structure, so the optimizer and the checkpoint code only
need ``named_arrays``/``map_arrays``.
"""
import math
from dataclasses import fields, replace

import numpy as np

from utils.errors import DimensionError


class ParamBundle:

    def named_arrays(self, prefix=""):
        """Yield (dotted name, array) for every learnable array, in field order."""
        for f in fields(self):
            value = getattr(self, f.name)
            key = prefix + f.name
            if isinstance(value, np.ndarray):
                yield key, value
            elif isinstance(value, ParamBundle):
                yield from value.named_arrays(key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_arrays(f"{key}.{i}.")

    def map_arrays(self, fn, prefix=""):
        """Return a bundle of the same structure with ``fn(name, array)`` applied."""
        updates = {}
        for f in fields(self):
            value = getattr(self, f.name)
            key = prefix + f.name
            if isinstance(value, np.ndarray):
                updates[f.name] = fn(key, value)
            elif isinstance(value, ParamBundle):
                updates[f.name] = value.map_arrays(fn, key + ".")
            elif isinstance(value, list):
                updates[f.name] = [item.map_arrays(fn, f"{key}.{i}.") for i, item in enumerate(value)]
        return replace(self, **updates)

    def zeros_like(self):
        return self.map_arrays(lambda _, a: np.zeros_like(a))

    def copy(self):
        return self.map_arrays(lambda _, a: a.copy())

    def load_arrays(self, arrays):
        """Replace every array by ``arrays[name]``; shapes must match."""
        def pick(name, current):
            if name not in arrays:
                raise DimensionError(f"missing parameter array '{name}'")
            new = np.asarray(arrays[name], dtype=np.float64)
            if new.shape != current.shape:
                raise DimensionError(f"parameter '{name}' has shape {new.shape}, expected {current.shape}")
            return new
        return self.map_arrays(pick)

    def num_scalars(self):
        return sum(a.size for _, a in self.named_arrays())

    def global_norm(self):
        return math.sqrt(sum(float(np.sum(a * a)) for _, a in self.named_arrays()))

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.named_arrays())


def add_bundles(a, b):
    """Element-wise sum of two bundles with identical structure."""
    other = dict(b.named_arrays())
    return a.map_arrays(lambda name, arr: arr + other[name])


# --- Initialization ---
def uniform_init(rng, fan_in, shape):
    """Scaled-uniform init with limit 1/sqrt(fan_in)."""
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def randomize(bundle, rng, scale=0.5):
    """Fill every array with N(0, scale^2) noise; used by the verification harness."""
    return bundle.map_arrays(lambda _, a: scale * rng.standard_normal(a.shape))
