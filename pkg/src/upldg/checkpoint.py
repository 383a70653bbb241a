"""Binary checkpoint files.

Byte layout (all integers little-endian):

======  =========  ===========================================================
offset  size       content
======  =========  ===========================================================
0       8          magic ``b"UPLDGCK1"``
8       4          uint32 header length ``H`` in bytes
12      H          UTF-8 JSON header (see below)
12+H    8 * total  float64 little-endian parameter data, tensors concatenated
                   in header order, each in row-major (C) order
======  =========  ===========================================================

The JSON header is an object with keys ``network`` (``input_dim``,
``hidden_dims``, ``num_classes``, ``dropout_rate``), ``tensors`` (a list of
``{"name": str, "shape": [int, ...]}`` in file order) and ``meta`` (free-form
string map). It is written with sorted keys and no whitespace, so saving the
same checkpoint twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, ParamSet, check_params

MAGIC = b"UPLDGCK1"


class CheckpointError(ValueError):
    pass


def encode(spec: NetworkSpec, params: ParamSet, meta: dict[str, str] | None = None) -> bytes:
    check_params(spec, params)
    header = {
        "network": {
            "input_dim": spec.input_dim,
            "hidden_dims": list(spec.hidden_dims),
            "num_classes": spec.num_classes,
            "dropout_rate": spec.dropout_rate,
        },
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "meta": dict(meta or {}),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    return MAGIC + struct.pack("<I", len(raw)) + raw + body


def decode(blob: bytes) -> tuple[NetworkSpec, ParamSet, dict[str, str]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    net = header["network"]
    spec = NetworkSpec(net["input_dim"], tuple(net["hidden_dims"]), net["num_classes"], net["dropout_rate"])
    params = ParamSet()
    offset = 12 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated data for tensor {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after tensor data")
    check_params(spec, params)
    return spec, params, header.get("meta", {})


def save_checkpoint(path, spec: NetworkSpec, params: ParamSet, meta: dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(spec, params, meta))
    return path


def load_checkpoint(path) -> tuple[NetworkSpec, ParamSet, dict[str, str]]:
    return decode(Path(path).read_bytes())
