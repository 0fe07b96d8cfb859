"""Named-tensor container used for model checkpoints and trainer state.

Layout::

    b"NLRNCKPT" | uint32 LE header length | UTF-8 JSON header | payloads

The header is ``{"tensors": [{"name", "shape", "dtype"}, ...], "meta": {...}}``
and the payloads are the tensors in header order as little-endian float32.
The header is space-padded so payloads start on a 64-byte boundary.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import NlrnConfig, NlrnParams, buffer_shapes, param_shapes

MAGIC = b"NLRNCKPT"
_ALIGN = 64
_DTYPE = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    """File is not a well-formed checkpoint."""


def encode(tensors: dict, meta: dict | None = None) -> bytes:
    entries, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    used = len(MAGIC) + 4 + len(header)
    header += b" " * (-used % _ALIGN)
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(payloads)


def decode(blob: bytes, source: str = "<bytes>"):
    """Inverse of :func:`encode`; returns ``(tensors, meta)``."""
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic, not an NLRN checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise CheckpointFormatError(f"{source}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{source}: malformed header ({exc})") from None
    tensors = {}
    offset = 12 + hlen
    for e in entries:
        if e.get("dtype") != "float32":
            raise CheckpointFormatError(f"{source}: unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"{source}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset)
        tensors[e["name"]] = arr.reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{source}: {len(blob) - offset} trailing bytes")
    return tensors, meta


def write_atomic(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read(path):
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def params_to_tensors(params: NlrnParams) -> dict:
    out = {name: params.tensors[name] for name, _ in param_shapes(params.config)}
    out.update({name: params.buffers[name] for name, _ in buffer_shapes(params.config)})
    return out


def params_meta(params: NlrnParams) -> dict:
    return {"config": params.config.to_dict(), "momentum": params.momentum, "eps": params.eps}


def save_params(path, params: NlrnParams, extra_meta: dict | None = None) -> None:
    meta = params_meta(params)
    if extra_meta:
        meta.update(extra_meta)
    write_atomic(path, encode(params_to_tensors(params), meta))


def params_from_tensors(tensors: dict, meta: dict, source: str = "<bytes>") -> NlrnParams:
    try:
        cfg = NlrnConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: bad model config ({exc})") from None
    model, buffers = {}, {}
    for target, shapes in ((model, param_shapes(cfg)), (buffers, buffer_shapes(cfg))):
        for name, shape in shapes:
            if name not in tensors:
                raise CheckpointFormatError(f"{source}: missing tensor {name}")
            if tensors[name].shape != tuple(shape):
                raise CheckpointFormatError(
                    f"{source}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}"
                )
            target[name] = tensors[name]
    return NlrnParams(cfg, model, buffers, meta.get("momentum", 0.9), meta.get("eps", 1e-5))


def load_params(path) -> NlrnParams:
    tensors, meta = read(path)
    return params_from_tensors(tensors, meta, str(path))
