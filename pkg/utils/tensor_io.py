 # utils/tensor_io.py
"""Flat little-endian tensor files and parameter checkpoints.

Tensor layout: u32 rank, u32 dims..., f64 payload in row-major order.
A checkpoint is a directory holding one ``.bin`` per named array plus a
``manifest.json`` with the pipeline config and the array names.
"""
import json
import struct
from pathlib import Path

import numpy as np

from utils.errors import ContractError


def encode_tensor(array):
    array = np.ascontiguousarray(array, dtype="<f8")
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(blob):
    if len(blob) < 4:
        raise ContractError("tensor blob shorter than its rank field")
    (rank,) = struct.unpack_from("<I", blob, 0)
    offset = 4 + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", blob, 4)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != offset + 8 * count:
        raise ContractError(
            f"tensor payload has {len(blob) - offset} bytes, expected {8 * count} for shape {shape}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=offset, count=count)
    return data.reshape(shape).astype(np.float64)


def save_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(directory, named_arrays, manifest):
    """Write every (name, array) pair and a JSON manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, array in named_arrays:
        save_tensor(directory / f"{name}.bin", array)
        names.append(name)
    manifest = dict(manifest, arrays=names, schema=1)
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory):
    """Return (manifest, {name: array})."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no checkpoint manifest in {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    arrays = {name: load_tensor(directory / f"{name}.bin") for name in manifest["arrays"]}
    return manifest, arrays
