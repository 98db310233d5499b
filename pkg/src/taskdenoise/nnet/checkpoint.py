"""Binary parameter checkpoints.

Layout: magic ``b"TDNMDL01"``, u32 version, u32 header length, UTF-8 JSON
header (architecture descriptor plus tensor table), then every tensor as
little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, IoError
from .model import ModelParams

MAGIC = b"TDNMDL01"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_params(params: ModelParams, path, extra=None):
    entries = [("tensor", k, v) for k, v in sorted(params.tensors.items())]
    entries += [("buffer", k, v) for k, v in sorted(params.buffers.items())]
    header = {
        "descriptor": params.descriptor(),
        "tensors": [{"kind": kind, "name": k, "shape": list(v.shape)} for kind, k, v in entries],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for _, _, v in entries:
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path, with_extra=False):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise FormatError("checkpoint too short")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    off = _PREFIX.size + hlen
    tensors, buffers = {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = off + 8 * n
        if end > len(raw):
            raise FormatError(f"checkpoint truncated: expected at least {end} bytes, got {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(e["shape"])
        (tensors if e["kind"] == "tensor" else buffers)[e["name"]] = arr
        off = end
    if off != len(raw):
        raise FormatError(f"checkpoint has {len(raw) - off} trailing bytes")
    d = header["descriptor"]
    params = ModelParams(
        d["arch"], d["n_channels"], d["n_samples"], d["fs"], d["n_classes"], tensors, buffers, d["hidden"], d["n_features"],
        bool(d.get("relative_power", False)),
    )
    return (params, header.get("extra", {})) if with_extra else params
