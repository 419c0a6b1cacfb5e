"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"MATVAECK"
    version    uint32    currently 1
    hlen       uint64    length of the JSON header in bytes
    header     hlen      UTF-8 JSON: {"config": {...}, "mode": str, "extra": {...}}
    count      uint32    number of arrays
    then per array:
      nlen     uint16    length of the name
      name     nlen      UTF-8
      ndim     uint8
      shape    ndim x uint64
      data     prod(shape) x float64 (little-endian, C order)

The attention mask, when set, is stored as the array ``__mask__`` (0.0/1.0).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from matvae.model import ModelConfig, ModelParams, param_layout
from matvae.tensor import Tensor

MAGIC = b"MATVAECK"
VERSION = 1
MASK_KEY = "__mask__"


class CheckpointError(ValueError):
    pass


def save(path, params: ModelParams, extra: dict | None = None) -> None:
    header = json.dumps({"config": params.config.to_dict(), "mode": params.mode, "extra": extra or {}},
                        sort_keys=True).encode()
    arrays = list(params.arrays().items())
    if params.config.mask is not None:
        arrays.append((MASK_KEY, params.config.mask.astype(np.float64)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            nb = name.encode()
            fh.write(struct.pack("<HB", len(nb), arr.ndim))
            fh.write(nb)
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path) -> tuple[ModelParams, dict]:
    """Returns (params, extra)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a matvae checkpoint")
    try:
        header, arrays, off = _parse(data, path)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    mask = arrays.pop(MASK_KEY, None)
    config = ModelConfig.from_dict(header["config"], mask=None if mask is None else mask > 0.5)
    mode = header["mode"]
    expected = {name: shape for name, shape, _ in param_layout(config, mode)}
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the config "
                              f"(missing {sorted(set(expected) - set(arrays))}, extra {sorted(set(arrays) - set(expected))})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    tensors = {name: Tensor(arrays[name], requires_grad=True) for name in expected}
    return ModelParams(config, mode, tensors), header.get("extra", {})


def _parse(data: bytes, path):
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return header, arrays, off
